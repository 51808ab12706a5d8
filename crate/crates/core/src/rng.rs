//! Deterministic random numbers.
//!
//! All shuffles, splits, initializations and synthetic data come from
//! xoshiro256** seeded through SplitMix64 (`Xoshiro256StarStar::seed_from_u64`),
//! so results are reproducible across platforms and by other implementations:
//!
//! - `below(n)`: `(next_u64() as u128 * n as u128) >> 64` (multiply-high, no rejection)
//! - `unit()`: `(next_u64() >> 11) as f64 * 2^-53`, in `[0, 1)`
//! - `normal()`: Box-Muller on two `unit()` draws, cosine branch only
//! - `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Debug, Clone)]
pub struct Rng64 {
    inner: Xoshiro256StarStar,
}

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256StarStar::seed_from_u64(seed) }
    }

    /// Independent stream derived from a base seed and a label.
    pub fn derived(seed: u64, label: &str) -> Self {
        Self::new(seed ^ fnv1a(label.as_bytes()).rotate_left(17))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
