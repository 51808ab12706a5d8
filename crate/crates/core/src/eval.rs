//! Modified BLEU (clipped 1- and 2-gram precision with brevity penalty),
//! sequence accuracies and attention grid export.
//!
//! All functions take already-decoded code sequences; special tokens are
//! expected to be stripped by the caller.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NgramCounts {
    pub matched: u64,
    pub total: u64,
}

impl NgramCounts {
    /// `None` when there are no candidate n-grams.
    pub fn precision(&self) -> Option<f64> {
        (self.total > 0).then(|| self.matched as f64 / self.total as f64)
    }
}

fn ngrams<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Candidate n-gram counts clipped by reference counts, summed over the corpus.
pub fn clipped_precision<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)], n: usize) -> NgramCounts {
    let mut out = NgramCounts::default();
    for (cand, reference) in pairs {
        let refs = ngrams(reference, n);
        for (gram, count) in ngrams(cand, n) {
            out.total += count;
            out.matched += count.min(refs.get(gram).copied().unwrap_or(0));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub p1: f64,
    /// Null when the candidates contain no bigrams; the score then uses `p1` alone.
    pub p2: Option<f64>,
    pub bp: f64,
    /// 0-100.
    pub score: f64,
    #[serde(skip)]
    pub counts: [NgramCounts; 2],
    #[serde(skip)]
    pub cand_len: u64,
    #[serde(skip)]
    pub ref_len: u64,
}

impl BleuReport {
    pub fn bigrams_absent(&self) -> bool {
        self.p2.is_none()
    }
}

/// Corpus-level modified BLEU on a 0-100 scale.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<BleuReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let c1 = clipped_precision(pairs, 1);
    let c2 = clipped_precision(pairs, 2);
    let cand_len: u64 = pairs.iter().map(|(c, _)| c.len() as u64).sum();
    let ref_len: u64 = pairs.iter().map(|(_, r)| r.len() as u64).sum();
    let bp = if cand_len == 0 { 0.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp().min(1.0) };
    let p1 = c1.precision().unwrap_or(0.0);
    let p2 = c2.precision();
    let mean = match p2 {
        Some(p2) => (p1 * p2).sqrt(),
        None => p1,
    };
    Ok(BleuReport { p1, p2, bp, score: 100.0 * bp * mean, counts: [c1, c2], cand_len, ref_len })
}

/// BLEU of a single pair, with the same bigram fallback.
pub fn sentence_bleu<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T]) -> BleuReport {
    corpus_bleu(&[(candidate.to_vec(), reference.to_vec())]).expect("one pair")
}

fn mean_of(values: impl Iterator<Item = f64>, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(values.sum::<f64>() / n as f64)
}

pub fn exact_sequence_accuracy<T: Eq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    mean_of(pairs.iter().map(|(c, r)| f64::from(u8::from(c == r))), pairs.len())
}

/// Size of the multiset intersection of two sequences.
pub fn multiset_overlap<T: Eq + Hash>(a: &[T], b: &[T]) -> u64 {
    let mut counts: HashMap<&T, u64> = HashMap::new();
    for x in b {
        *counts.entry(x).or_insert(0) += 1;
    }
    let mut hits = 0;
    for x in a {
        if let Some(c) = counts.get_mut(x).filter(|c| **c > 0) {
            *c -= 1;
            hits += 1;
        }
    }
    hits
}

/// Order-insensitive code recall: Σ |cand ∩ ref| / Σ |ref| over multisets.
pub fn code_accuracy<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits: u64 = pairs.iter().map(|(c, r)| multiset_overlap(c, r)).sum();
    let total: u64 = pairs.iter().map(|(_, r)| r.len() as u64).sum();
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Fraction of records whose first code matches.
pub fn underlying_accuracy<T: Eq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    mean_of(pairs.iter().map(|(c, r)| f64::from(u8::from(c.first().is_some() && c.first() == r.first()))), pairs.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub exact_sequence: f64,
    pub code_level: f64,
    pub underlying: f64,
    pub n_records: usize,
}

pub fn accuracies<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<AccuracyReport> {
    Ok(AccuracyReport {
        exact_sequence: exact_sequence_accuracy(pairs)?,
        code_level: code_accuracy(pairs)?,
        underlying: underlying_accuracy(pairs)?,
        n_records: pairs.len(),
    })
}

/// The evaluation report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: BleuReport,
    pub exact: f64,
    pub code: f64,
    pub underlying: f64,
    pub n: usize,
}

pub fn evaluate<T: Eq + Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<EvalReport> {
    let bleu = corpus_bleu(pairs)?;
    let acc = accuracies(pairs)?;
    Ok(EvalReport { bleu, exact: acc.exact_sequence, code: acc.code_level, underlying: acc.underlying, n: acc.n_records })
}

/// Attention weights with row (target) and column (source) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrid {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

const CORNER: &str = "tgt\\src";

impl AttentionGrid {
    /// Tab-separated text: a header of source codes, then one labelled row per
    /// target step. Values use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::from(CORNER);
        for s in &self.src {
            out.push('\t');
            out.push_str(s);
        }
        out.push('\n');
        for (label, row) in self.tgt.iter().zip(&self.weights) {
            out.push_str(label);
            for v in row {
                write!(out, "\t{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::CorpusParse { path: "<attention>".into(), line, msg };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let mut cols = header.split('\t');
        if cols.next() != Some(CORNER) {
            return Err(bad(1, "header must start with the corner label".into()));
        }
        let src: Vec<String> = cols.map(String::from).collect();
        let (mut tgt, mut weights) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let mut cells = line.split('\t');
            tgt.push(cells.next().unwrap_or_default().to_string());
            let row = cells.map(|c| c.parse::<f64>().map_err(|e| bad(i + 2, format!("bad value `{c}`: {e}")))).collect::<Result<Vec<_>>>()?;
            if row.len() != src.len() {
                return Err(bad(i + 2, format!("expected {} values, found {}", src.len(), row.len())));
            }
            weights.push(row);
        }
        Ok(Self { src, tgt, weights })
    }
}

/// Writes the grid for one hypothesis. `tgt` labels the rows; an extra row
/// beyond the labels is named `</s>`.
pub fn export_attention(attention: &[Vec<f64>], src: &[String], tgt: &[String], path: impl AsRef<Path>) -> Result<AttentionGrid> {
    let mut labels: Vec<String> = tgt.to_vec();
    while labels.len() < attention.len() {
        labels.push("</s>".into());
    }
    labels.truncate(attention.len());
    if let Some(row) = attention.iter().find(|r| r.len() != src.len()) {
        return Err(Error::ConfigInvalid(format!("attention row has {} columns for {} source codes", row.len(), src.len())));
    }
    let grid = AttentionGrid { src: src.to_vec(), tgt: labels, weights: attention.to_vec() };
    crate::corpus::write_file(path.as_ref(), grid.to_text().as_bytes())?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn pair(c: &str, r: &str) -> (Vec<String>, Vec<String>) {
        (seq(c), seq(r))
    }

    #[test]
    fn worked_example_precisions() {
        let pairs = [pair("R909 J189 J969", "R909 J189 J960")];
        let c1 = clipped_precision(&pairs, 1);
        let c2 = clipped_precision(&pairs, 2);
        assert_eq!((c1.matched, c1.total), (2, 3));
        assert_eq!((c2.matched, c2.total), (1, 2));
        let b = corpus_bleu(&pairs).unwrap();
        assert_eq!(b.bp, 1.0);
        assert!((b.score - 100.0 * (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn candidate_table() {
        let r = "I251 I38 I429 I469";
        for (c, want) in [
            ("I429 I38 I469 I251", 0.0),
            ("I38 I429 I251 I469", 57.7),
            ("I429 I469 I251 I38", 81.6),
            ("I38 I429 I469 I251", 81.6),
            ("I251 I38 I429 I469", 100.0),
        ] {
            let b = corpus_bleu(&[pair(c, r)]).unwrap();
            assert!((b.score - want).abs() < 0.1, "{c}: {}", b.score);
        }
    }

    #[test]
    fn clipping() {
        let c = clipped_precision(&[pair("A00 A00 A00", "A00")], 1);
        assert_eq!((c.matched, c.total), (1, 3));
    }

    #[test]
    fn brevity_penalty() {
        let b = corpus_bleu(&[pair("A00 B00", "A00 B00 C00 D00")]).unwrap();
        assert!((b.bp - (-1.0f64).exp()).abs() < 1e-15);
        assert!((b.score - 36.787944117144235).abs() < 1e-9);
    }

    #[test]
    fn bigram_fallback_and_empty_candidates() {
        let b = corpus_bleu(&[pair("A00", "A00")]).unwrap();
        assert!(b.bigrams_absent());
        assert_eq!(b.score, 100.0);
        let b = corpus_bleu(&[pair("", "A00")]).unwrap();
        assert_eq!(b.score, 0.0);
        assert!(corpus_bleu::<String>(&[]).is_err());
        let json = serde_json::to_value(corpus_bleu(&[pair("A00", "A00")]).unwrap()).unwrap();
        assert_eq!(json, serde_json::json!({"p1": 1.0, "p2": null, "bp": 1.0, "score": 100.0}));
    }

    #[test]
    fn accuracy_examples() {
        let same = [pair("A00 B00", "A00 B00")];
        assert_eq!(exact_sequence_accuracy(&same).unwrap(), 1.0);
        assert_eq!(exact_sequence_accuracy(&[pair("B00 A00", "A00 B00")]).unwrap(), 0.0);
        assert_eq!(exact_sequence_accuracy(&[pair("A00", "A00"), pair("A00", "B00")]).unwrap(), 0.5);
        assert!((code_accuracy(&[pair("C00 A00 X00", "A00 B00 C00")]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(code_accuracy(&[pair("X00", "A00")]).unwrap(), 0.0);
        assert_eq!(underlying_accuracy(&[pair("A00 X00", "A00 B00")]).unwrap(), 1.0);
        assert_eq!(underlying_accuracy(&[pair("X00 B00", "A00 B00")]).unwrap(), 0.0);
        let four = [pair("A00", "A00"), pair("B00", "A00"), pair("", "A00"), pair("C00", "A00")];
        assert_eq!(underlying_accuracy(&four).unwrap(), 0.25);
        let r = evaluate(&four).unwrap();
        assert_eq!(r.n, 4);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["bleu", "exact", "code", "underlying", "n"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn attention_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsv");
        let w = vec![vec![0.1, 0.2, 0.7], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        let grid = export_attention(&w, &seq("4280 1890 2761"), &seq("I500"), &path).unwrap();
        assert_eq!(grid.tgt, seq("I500 </s>"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("tgt\\src\t4280\t1890\t2761\n"));
        let back = AttentionGrid::parse(&text).unwrap();
        assert_eq!(back, grid);
        for row in &back.weights {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert!(AttentionGrid::parse("x\ty\n").is_err());
        assert!(AttentionGrid::parse("tgt\\src\ta\tb\nI500\t0.5\n").is_err());
        assert!(export_attention(&[vec![1.0]], &seq("a b"), &[], &path).is_err());
    }

    fn code_seq() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..6, 0..6)
    }

    proptest! {
        #[test]
        fn bleu_bounds_and_permutation_invariance(pairs in prop::collection::vec((code_seq(), code_seq()), 1..8), rot in 0usize..8) {
            let b = corpus_bleu(&pairs).unwrap();
            prop_assert!((0.0..=100.0).contains(&b.score));
            let mut rotated = pairs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let c = corpus_bleu(&rotated).unwrap();
            prop_assert_eq!(b.score, c.score);
            let identical: Vec<(Vec<u8>, Vec<u8>)> = pairs.iter().map(|(_, r)| (r.clone(), r.clone())).collect();
            if identical.iter().any(|(_, r)| !r.is_empty()) {
                prop_assert_eq!(corpus_bleu(&identical).unwrap().score, 100.0);
            }
            if pairs.iter().all(|(c, r)| c.len() >= r.len()) && b.cand_len > 0 {
                prop_assert_eq!(b.bp, 1.0);
            }
        }

        #[test]
        fn exact_match_implies_full_credit(r in prop::collection::vec(0u8..6, 1..6)) {
            let pairs = vec![(r.clone(), r)];
            prop_assert_eq!(code_accuracy(&pairs).unwrap(), 1.0);
            prop_assert_eq!(underlying_accuracy(&pairs).unwrap(), 1.0);
        }
    }
}
