use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Record;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Src,
    Tgt,
}

/// Token list with four special tokens at fixed indices 0-3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

    /// Tokens with frequency >= `min_freq`, ordered by descending frequency
    /// then ascending text, after the special tokens.
    pub fn build(records: &[Record], side: Side, min_freq: usize) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for r in records {
            let codes = match side {
                Side::Src => &r.src,
                Side::Tgt => &r.tgt,
            };
            for c in codes {
                *freq.entry(c.as_str()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, n)| n >= min_freq.max(1)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Vocabulary from an ordered list of non-special tokens.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        all.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= Self::SPECIALS.len()
    }

    pub fn is_special(&self, index: usize) -> bool {
        index < Self::SPECIALS.len()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Index of `token`, or [`Vocabulary::UNK`].
    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn encode_all<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode(t.as_ref())).collect()
    }

    /// Decoded tokens with special tokens dropped.
    pub fn decode_codes(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().filter(|&&i| !self.is_special(i)).filter_map(|&i| self.get(i)).map(str::to_string).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
