//! ACME decision table as a causal-validity graph.
//!
//! Each table row reads `F3 F2 [F1]`: effect code F3 may be caused by code F2,
//! or by any code in the inclusive range F2..=F1. Ranges compare normalized
//! (undotted, uppercase) code text lexicographically, so `C000..=C97` covers
//! `C341` but not `C9700`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::corpus::{Record, Vocabulary};
use crate::error::{Error, Result};
use crate::icd::{normalize_code, CodeSystem, NormalizedCode};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct AcmeRule {
    pub effect: NormalizedCode,
    pub cause_lo: NormalizedCode,
    pub cause_hi: Option<NormalizedCode>,
}

impl AcmeRule {
    pub fn covers(&self, cause: &str, effect: &str) -> bool {
        if self.effect.as_str() != effect {
            return false;
        }
        match &self.cause_hi {
            None => self.cause_lo.as_str() == cause,
            Some(hi) => self.cause_lo.as_str() <= cause && cause <= hi.as_str(),
        }
    }
}

/// Cause intervals per effect, merged so that they are disjoint and sorted.
#[derive(Debug, Clone, Default)]
struct IntervalSet {
    spans: Vec<(String, String)>,
}

impl IntervalSet {
    fn from_spans(mut spans: Vec<(String, String)>) -> Self {
        spans.sort();
        let mut merged: Vec<(String, String)> = Vec::with_capacity(spans.len());
        for (lo, hi) in spans {
            match merged.last_mut() {
                Some(last) if lo <= last.1 => {
                    if hi > last.1 {
                        last.1 = hi;
                    }
                }
                _ => merged.push((lo, hi)),
            }
        }
        Self { spans: merged }
    }

    fn contains(&self, code: &str) -> bool {
        // last span whose lower bound is <= code
        let idx = self.spans.partition_point(|(lo, _)| lo.as_str() <= code);
        idx > 0 && code <= self.spans[idx - 1].1.as_str()
    }
}

/// Immutable after construction.
#[derive(Debug, Clone, Default)]
pub struct CausalGraph {
    rules: Vec<AcmeRule>,
    unique_rules: usize,
    index: BTreeMap<String, IntervalSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ChainValidity {
    pub valid: bool,
    pub first_bad_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<Record>,
    pub removed_count: usize,
}

impl CausalGraph {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::AcmeParse { path: origin.to_path_buf(), line: i + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(err(format!("expected 2 or 3 codes, found {}", fields.len())));
            }
            let code = |s: &str| normalize_code(s, CodeSystem::Icd10).map_err(|e| err(e.to_string()));
            let effect = code(fields[0])?;
            let cause_lo = code(fields[1])?;
            let cause_hi = fields.get(2).map(|s| code(s)).transpose()?;
            if let Some(hi) = &cause_hi {
                if cause_lo > *hi {
                    return Err(err(format!("range {cause_lo}..{hi} is reversed")));
                }
            }
            rules.push(AcmeRule { effect, cause_lo, cause_hi });
        }
        Ok(Self::from_rules(rules))
    }

    pub fn from_rules(rules: Vec<AcmeRule>) -> Self {
        let mut by_effect: BTreeMap<String, BTreeSet<(String, String)>> = BTreeMap::new();
        for r in &rules {
            let lo = r.cause_lo.as_str().to_string();
            let hi = r.cause_hi.as_ref().map_or_else(|| lo.clone(), |h| h.as_str().to_string());
            by_effect.entry(r.effect.as_str().to_string()).or_default().insert((lo, hi));
        }
        let unique_rules = by_effect.values().map(BTreeSet::len).sum();
        let index = by_effect
            .into_iter()
            .map(|(e, spans)| (e, IntervalSet::from_spans(spans.into_iter().collect())))
            .collect();
        Self { rules, unique_rules, index }
    }

    pub fn rules(&self) -> &[AcmeRule] {
        &self.rules
    }

    /// Number of table lines loaded, duplicates included.
    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    pub fn unique_rule_count(&self) -> usize {
        self.unique_rules
    }

    pub fn is_valid_pair(&self, cause: &NormalizedCode, effect: &NormalizedCode) -> bool {
        self.is_valid_pair_str(cause.as_str(), effect.as_str())
    }

    pub fn is_valid_pair_str(&self, cause: &str, effect: &str) -> bool {
        self.index.get(effect).is_some_and(|set| set.contains(cause))
    }

    /// Validity of `chain[i] -> chain[i + 1]` for every adjacent pair.
    pub fn edge_validity<S: AsRef<str>>(&self, chain: &[S]) -> Vec<bool> {
        chain
            .windows(2)
            .map(|w| self.is_valid_pair_str(w[0].as_ref(), w[1].as_ref()))
            .collect()
    }

    /// A chain is valid iff every adjacent pair is; chains of one code are valid.
    pub fn chain_is_valid<S: AsRef<str>>(&self, chain: &[S]) -> ChainValidity {
        let first_bad_index = chain
            .windows(2)
            .position(|w| !self.is_valid_pair_str(w[0].as_ref(), w[1].as_ref()));
        ChainValidity { valid: first_bad_index.is_none(), first_bad_index }
    }

    /// Keep records whose target chain is valid, in order.
    pub fn filter_corpus(&self, records: &[Record]) -> FilterOutcome {
        let kept: Vec<Record> =
            records.iter().filter(|r| self.chain_is_valid(&r.tgt).valid).cloned().collect();
        FilterOutcome { removed_count: records.len() - kept.len(), kept }
    }

    pub fn build_constraint_mask(&self, vocab: &Vocabulary) -> ConstraintMask {
        let n = vocab.len();
        let words = n.div_ceil(64);
        let mut bits = vec![0u64; n * words];
        let set = |bits: &mut [u64], a: usize, b: usize| bits[a * words + b / 64] |= 1 << (b % 64);
        for a in 0..n {
            for b in 0..n {
                let allowed = vocab.is_special(a)
                    || vocab.is_special(b)
                    || self.is_valid_pair_str(vocab.token(a), vocab.token(b));
                if allowed {
                    set(&mut bits, a, b);
                }
            }
        }
        ConstraintMask { size: n, words, bits }
    }
}

/// `allows(a, b)`: target token `b` may follow token `a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintMask {
    size: usize,
    words: usize,
    bits: Vec<u64>,
}

impl ConstraintMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, prev: usize, next: usize) -> bool {
        prev < self.size && next < self.size && self.bits[prev * self.words + next / 64] >> (next % 64) & 1 == 1
    }

    pub fn row(&self, prev: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.size).filter(move |&b| self.allows(prev, b))
    }
}
