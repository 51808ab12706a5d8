use serde::{Deserialize, Serialize};

use super::Record;
use crate::rng::Rng64;

/// Train/valid/test ratios and shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub ratios: (u32, u32, u32),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { ratios: (7, 1, 2), seed: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Record>,
    pub valid: Vec<Record>,
    pub test: Vec<Record>,
}

#[derive(Debug, Clone, Default)]
pub struct Fold {
    pub train: Vec<Record>,
    pub valid: Vec<Record>,
    pub test: Vec<Record>,
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng64::new(seed).shuffle(&mut idx);
    idx
}

fn pick(records: &[Record], idx: &[usize]) -> Vec<Record> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

/// Seeded shuffle, then proportional partition. Remainders go to train.
pub fn split(records: &[Record], spec: SplitSpec) -> Splits {
    let n = records.len();
    let (a, b, c) = spec.ratios;
    let total = (a + b + c).max(1) as usize;
    let n_valid = n * b as usize / total;
    let n_test = n * c as usize / total;
    let n_train = n - n_valid - n_test;
    let idx = shuffled_indices(n, spec.seed);
    Splits {
        train: pick(records, &idx[..n_train]),
        valid: pick(records, &idx[n_train..n_train + n_valid]),
        test: pick(records, &idx[n_train + n_valid..]),
    }
}

/// `k` folds over a seeded shuffle. Each fold's non-test part is split 7:1
/// into train and valid (remainder to train), keeping shuffled order.
pub fn kfold(records: &[Record], k: usize, seed: u64) -> Vec<Fold> {
    let n = records.len();
    let k = k.max(1);
    let idx = shuffled_indices(n, seed);
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        bounds.push(bounds[f] + size);
    }
    (0..k)
        .map(|f| {
            let test_idx = &idx[bounds[f]..bounds[f + 1]];
            let rest: Vec<usize> = idx[..bounds[f]].iter().chain(&idx[bounds[f + 1]..]).copied().collect();
            let n_valid = rest.len() / 8;
            let n_train = rest.len() - n_valid;
            Fold {
                train: pick(records, &rest[..n_train]),
                valid: pick(records, &rest[n_train..]),
                test: pick(records, test_idx),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icd::{normalize_code, CodeSystem};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn corpus(n: usize) -> Vec<Record> {
        (0..n)
            .map(|i| Record {
                id: format!("r{i}"),
                src: vec![normalize_code("4280", CodeSystem::Icd9).unwrap()],
                tgt: vec![normalize_code("I500", CodeSystem::Icd10).unwrap()],
            })
            .collect()
    }

    fn ids(rs: &[Record]) -> BTreeSet<String> {
        rs.iter().map(|r| r.id.clone()).collect()
    }

    #[test]
    fn ratio_sizes() {
        let s = split(&corpus(10), SplitSpec { ratios: (7, 1, 2), seed: 5 });
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (7, 1, 2));
        let s = split(&corpus(11), SplitSpec { ratios: (7, 1, 2), seed: 5 });
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 2));
    }

    #[test]
    fn split_is_deterministic() {
        let c = corpus(50);
        let a = split(&c, SplitSpec { ratios: (7, 1, 2), seed: 3 });
        let b = split(&c, SplitSpec { ratios: (7, 1, 2), seed: 3 });
        assert_eq!(a.test, b.test);
        assert_eq!(a.train, b.train);
        let other = split(&c, SplitSpec { ratios: (7, 1, 2), seed: 4 });
        assert_ne!(a.test, other.test);
    }

    #[test]
    fn five_folds_of_ten() {
        let c = corpus(10);
        let folds = kfold(&c, 5, 1);
        assert_eq!(folds.len(), 5);
        assert!(folds.iter().all(|f| f.test.len() == 2));
        let union: BTreeSet<String> = folds.iter().flat_map(|f| ids(&f.test)).collect();
        assert_eq!(union, ids(&c));
        let again = kfold(&c, 5, 1);
        for (a, b) in folds.iter().zip(&again) {
            assert_eq!(a.test, b.test);
            assert_eq!(a.train, b.train);
        }
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_exhaustive(n in 5usize..120, seed in any::<u64>(), k in 2usize..6) {
            let c = corpus(n);
            let all = ids(&c);
            let s = split(&c, SplitSpec { ratios: (7, 1, 2), seed });
            let (tr, va, te) = (ids(&s.train), ids(&s.valid), ids(&s.test));
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(s.train.len() + s.valid.len() + s.test.len(), n);
            let union: BTreeSet<String> = tr.union(&va).cloned().chain(te.iter().cloned()).collect();
            prop_assert_eq!(&union, &all);

            let folds = kfold(&c, k, seed);
            let mut seen = BTreeSet::new();
            for f in &folds {
                let (tr, va, te) = (ids(&f.train), ids(&f.valid), ids(&f.test));
                prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
                prop_assert_eq!(f.train.len() + f.valid.len() + f.test.len(), n);
                for id in te {
                    prop_assert!(seen.insert(id));
                }
            }
            prop_assert_eq!(seen, all);
        }
    }
}
