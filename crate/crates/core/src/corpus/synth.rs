//! Synthetic corpus generator.
//!
//! Construction, all driven by one seeded [`Rng64`]:
//! 1. Draw distinct pseudo ICD-9 source codes and pseudo ICD-10 target codes.
//! 2. Build a random DAG over target codes (edges only from lower to higher
//!    index, `rule_fanout` successors per node) and emit it as ACME lines.
//! 3. Split source codes into *active* codes (hidden priority in (1, 2],
//!    decreasing with the target they map to) and *filler* codes (priority in
//!    [0, 1)). Active code `j` maps to target `j mod T`.
//! 4. Per record, sample a chain length (point mass at 1, shifted geometric
//!    tail, calibrated to the configured mean), walk a DAG path of exactly that
//!    length, add one active source per chain code and a Gaussian-length set of
//!    fillers, then sort the source by hidden priority.
//!
//! The target is therefore a deterministic function of the source: the mapped
//! targets of the active codes, in source order ([`SyntheticOracle::chain_for`]).

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_file, write_jsonl, write_parallel, Record, MAX_SRC_LEN, MAX_TGT_LEN};
use crate::error::{Error, Result};
use crate::icd::{normalize_code, CodeSystem, NormalizedCode};
use crate::rng::Rng64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_records: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub mean_src_len: f64,
    pub mean_tgt_len: f64,
    pub one_code_chain_fraction: f64,
    pub rule_fanout: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_records: 5000,
            src_vocab_size: 50,
            tgt_vocab_size: 30,
            mean_src_len: 18.84,
            mean_tgt_len: 2.25,
            one_code_chain_fraction: 0.3177,
            rule_fanout: 4,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.n_records == 0 || self.src_vocab_size < 2 || self.tgt_vocab_size == 0 || self.rule_fanout == 0 {
            return bad("counts must be positive and src_vocab_size >= 2");
        }
        if self.src_vocab_size > 9000 || self.tgt_vocab_size > 20_000 {
            return bad("vocabulary too large for pseudo-code space");
        }
        if !(0.0..=1.0).contains(&self.one_code_chain_fraction) {
            return bad("one_code_chain_fraction must lie in [0, 1]");
        }
        if !(self.mean_src_len >= 1.0) || !(self.mean_tgt_len >= 1.0) {
            return bad("mean lengths must be >= 1");
        }
        if self.one_code_chain_fraction < 1.0 && self.tail_mean() < 2.0 {
            return bad("mean_tgt_len too small for the requested one-code fraction");
        }
        Ok(())
    }

    /// Mean chain length conditioned on length >= 2.
    fn tail_mean(&self) -> f64 {
        (self.mean_tgt_len - self.one_code_chain_fraction) / (1.0 - self.one_code_chain_fraction)
    }
}

/// The hidden source-to-target function.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    pub priority: HashMap<String, f64>,
    pub mapping: HashMap<String, String>,
    pub threshold: f64,
}

impl SyntheticOracle {
    pub fn chain_for<S: AsRef<str>>(&self, src: &[S]) -> Vec<String> {
        src.iter()
            .filter(|s| self.priority.get(s.as_ref()).is_some_and(|&p| p > self.threshold))
            .map(|s| self.mapping[s.as_ref()].clone())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<Record>,
    /// DAG edges as (cause, effect).
    pub hidden_rules: Vec<(NormalizedCode, NormalizedCode)>,
    /// ACME table lines, `EFFECT CAUSE`.
    pub acme_lines: Vec<String>,
    /// GEM lines mapping every source code to a pseudo ICD-10 code.
    pub gem_lines: Vec<String>,
    pub oracle: SyntheticOracle,
}

impl SyntheticCorpus {
    /// Write `<name>.src`, `<name>.tgt`, `<name>.jsonl`, `acme.txt` and `gem.txt`.
    pub fn write_to(&self, dir: &Path, name: &str) -> Result<()> {
        write_parallel(&self.records, dir.join(format!("{name}.src")), dir.join(format!("{name}.tgt")))?;
        write_jsonl(&self.records, dir.join(format!("{name}.jsonl")))?;
        let lines = |ls: &[String]| ls.iter().map(|l| format!("{l}\n")).collect::<String>();
        write_file(&dir.join("acme.txt"), lines(&self.acme_lines).as_bytes())?;
        write_file(&dir.join("gem.txt"), lines(&self.gem_lines).as_bytes())
    }
}

const ICD10_LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTVWXYZ";

fn distinct_codes(rng: &mut Rng64, n: usize, mut make: impl FnMut(&mut Rng64) -> String, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let code = make(rng);
        if taken.insert(code.clone()) {
            out.push(code);
        }
    }
    out
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = Rng64::new(config.seed);
    let (s_n, t_n) = (config.src_vocab_size, config.tgt_vocab_size);

    let mut taken = HashSet::new();
    let src_codes = distinct_codes(&mut rng, s_n, |r| format!("{:04}", 1000 + r.below(9000)), &mut taken);
    let tgt_codes = distinct_codes(
        &mut rng,
        t_n,
        |r| format!("{}{:03}", ICD10_LETTERS[r.below(ICD10_LETTERS.len())] as char, r.below(1000)),
        &mut taken,
    );

    // DAG in index order.
    let mut successors: Vec<Vec<usize>> = vec![Vec::new(); t_n];
    for (i, succ) in successors.iter_mut().enumerate() {
        let mut later: Vec<usize> = (i + 1..t_n).collect();
        rng.shuffle(&mut later);
        later.truncate(config.rule_fanout);
        later.sort_unstable();
        *succ = later;
    }
    let n_active = t_n.min(s_n - s_n / 3).max(1);
    let reachable: Vec<bool> = (0..t_n).map(|j| j < n_active || n_active >= t_n).collect();
    // longest path (in nodes) starting at each target, through reachable targets only
    let mut longest = vec![0usize; t_n];
    for i in (0..t_n).rev() {
        if reachable[i] {
            longest[i] = 1 + successors[i].iter().map(|&j| longest[j]).max().unwrap_or(0);
        }
    }
    let max_chain = longest.iter().copied().max().unwrap_or(1).min(MAX_TGT_LEN);

    let mut hidden_rules = Vec::new();
    let mut acme_lines = Vec::new();
    for (i, succ) in successors.iter().enumerate() {
        for &j in succ {
            let cause = normalize_code(&tgt_codes[i], CodeSystem::Icd10)?;
            let effect = normalize_code(&tgt_codes[j], CodeSystem::Icd10)?;
            acme_lines.push(format!("{effect} {cause}"));
            hidden_rules.push((cause, effect));
        }
    }

    // Hidden priorities and mapping.
    let active_jitter: Vec<f64> = (0..n_active).map(|_| rng.uniform(0.0, 0.5)).collect();
    let mut priority = HashMap::new();
    let mut mapping = HashMap::new();
    let mut actives_for_target: Vec<Vec<usize>> = vec![Vec::new(); t_n];
    for (k, code) in src_codes.iter().enumerate() {
        let target = k % t_n;
        let p = if k < n_active {
            actives_for_target[target].push(k);
            2.0 - (target as f64 + active_jitter[k]) / t_n as f64
        } else {
            rng.uniform(0.0, 0.999)
        };
        priority.insert(code.clone(), p);
        mapping.insert(code.clone(), tgt_codes[target].clone());
    }
    let fillers: Vec<usize> = (n_active..s_n).collect();

    let mut gem_taken = HashSet::new();
    let gem_targets = distinct_codes(
        &mut rng,
        s_n,
        |r| format!("{}{:04}", ICD10_LETTERS[r.below(ICD10_LETTERS.len())] as char, r.below(10_000)),
        &mut gem_taken,
    );
    let gem_lines = src_codes.iter().zip(&gem_targets).map(|(s, t)| format!("{s} {t} 00000")).collect();

    let f1 = config.one_code_chain_fraction;
    let q = if f1 < 1.0 {
        let m2 = config.tail_mean();
        (m2 - 2.0) / (m2 - 1.0)
    } else {
        0.0
    };
    let src_sd = config.mean_src_len / 3.0;

    let mut records = Vec::with_capacity(config.n_records);
    for r in 0..config.n_records {
        let mut len = if rng.unit() < f1 {
            1
        } else {
            let mut n = 2;
            while rng.unit() < q && n < MAX_TGT_LEN {
                n += 1;
            }
            n
        };
        len = len.min(max_chain);

        let starts: Vec<usize> = (0..t_n).filter(|&i| longest[i] >= len).collect();
        let mut node = starts[rng.below(starts.len())];
        let mut path = vec![node];
        while path.len() < len {
            let need = len - path.len();
            let options: Vec<usize> = successors[node].iter().copied().filter(|&j| longest[j] >= need).collect();
            node = options[rng.below(options.len())];
            path.push(node);
        }

        let mut src_idx: Vec<usize> =
            path.iter().map(|&t| actives_for_target[t][rng.below(actives_for_target[t].len())]).collect();
        let lo = len.max(1);
        let hi = (len + fillers.len()).min(MAX_SRC_LEN).max(lo);
        let want = (config.mean_src_len + src_sd * rng.normal()).round();
        let src_len = (want.max(lo as f64) as usize).clamp(lo, hi);
        let mut pool = fillers.clone();
        for i in 0..src_len - len {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        src_idx.extend_from_slice(&pool[..src_len - len]);
        src_idx.sort_by(|&a, &b| priority[&src_codes[b]].total_cmp(&priority[&src_codes[a]]));

        let src = src_idx.iter().map(|&k| normalize_code(&src_codes[k], CodeSystem::Icd9)).collect::<Result<Vec<_>>>()?;
        let tgt = path.iter().map(|&t| normalize_code(&tgt_codes[t], CodeSystem::Icd10)).collect::<Result<Vec<_>>>()?;
        records.push(Record { id: format!("syn{r:06}"), src, tgt });
    }

    Ok(SyntheticCorpus {
        records,
        hidden_rules,
        acme_lines,
        gem_lines,
        oracle: SyntheticOracle { priority, mapping, threshold: 1.0 },
    })
}
