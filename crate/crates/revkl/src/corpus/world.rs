//! The synthetic trigram world: an exactly solvable second-order Markov
//! distribution over a fixed vocabulary.
//!
//! Trigram weights take the form `alpha(j) * beta(i, j) * beta(k, j)` where
//! `beta(a, b) = (a * (|a - b + xi| + 1))^-gamma` and `xi` is a pseudo-random
//! value in `{0..5}` drawn once per triple `(i, j, k)` and shared by both
//! beta factors. `xi` is a keyed pseudo-random function of the world seed and
//! the triple, so the full 10^9-entry table never has to be materialized.
//!
//! Word ids are 1-based (`1..=vocab_size`); id 0 is the sentence-start marker
//! and never occurs inside a trigram.

use crate::error::{Error, Result};

pub const GAMMA: f64 = 0.75;
pub const XI_VALUES: u64 = 6;

const MIX_I: u64 = 0x9e37_79b9_7f4a_7c15;
const MIX_J: u64 = 0xc2b2_ae3d_27d4_eb4f;
const MIX_K: u64 = 0x1656_67b1_9e37_79f9;

/// splitmix64 finalizer; full-avalanche mix of a 64-bit value.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The exact synthetic data distribution plus lookup tables for fast row
/// evaluation. Cheap to construct; the expensive start-pair distribution
/// lives in [`super::StartMarginal`] and is built or loaded separately.
#[derive(Debug, Clone)]
pub struct TrigramWorld {
    vocab_size: usize,
    gamma: f64,
    seed: u64,
    /// alpha(j) for j in 1..=V; index 0 unused.
    alpha: Vec<f64>,
    /// n^-gamma for n in 1..=V+6; index 0 unused.
    pow_neg_gamma: Vec<f64>,
}

impl TrigramWorld {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        assert!(vocab_size >= 2, "vocab_size must be at least 2");
        let mut alpha = vec![0.0; vocab_size + 1];
        for (j, a) in alpha.iter_mut().enumerate().skip(1) {
            *a = alpha_weight(j);
        }
        let mut pow_neg_gamma = vec![0.0; vocab_size + XI_VALUES as usize + 2];
        for (n, p) in pow_neg_gamma.iter_mut().enumerate().skip(1) {
            *p = (n as f64).powf(-GAMMA);
        }
        TrigramWorld {
            vocab_size,
            gamma: GAMMA,
            seed,
            alpha,
            pow_neg_gamma,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-word weight of the middle trigram slot.
    pub fn alpha(&self, j: u32) -> f64 {
        self.check_word(j).expect("alpha: word id out of range");
        self.alpha[j as usize]
    }

    /// Deterministic pseudo-random xi in `{0..5}` for a triple. Same triple
    /// and seed always yield the same value; distinct seeds give
    /// decorrelated streams.
    #[inline]
    pub fn xi(&self, i: u32, j: u32, k: u32) -> u8 {
        let h = mix(self.xi_prefix(i, j) ^ (k as u64).wrapping_mul(MIX_K));
        (h % XI_VALUES) as u8
    }

    /// Mixing prefix shared by every k of a `(i, j)` row.
    #[inline]
    fn xi_prefix(&self, i: u32, j: u32) -> u64 {
        mix(mix(self.seed ^ (i as u64).wrapping_mul(MIX_I)) ^ (j as u64).wrapping_mul(MIX_J))
    }

    /// `beta(a, b) = (a * (|a - b + xi| + 1))^-gamma`, always positive.
    pub fn beta(&self, a: u32, b: u32, xi_val: u8) -> f64 {
        debug_assert!(xi_val < XI_VALUES as u8);
        let diff = (a as i64 - b as i64 + xi_val as i64).unsigned_abs() + 1;
        ((a as u64 * diff) as f64).powf(-self.gamma)
    }

    /// Unnormalized row weights `w(i, j, k)` over k = 1..=V, index k-1.
    /// The shared per-triple xi enters both beta factors. The `alpha(j)`
    /// factor is included even though it cancels under normalization, so the
    /// returned weights are the literal trigram weights.
    pub fn raw_row(&self, i: u32, j: u32) -> Vec<f64> {
        self.check_word(i).expect("raw_row: i out of range");
        self.check_word(j).expect("raw_row: j out of range");
        let v = self.vocab_size;
        let prefix = self.xi_prefix(i, j);
        // (|i - j + xi| + 1)^-gamma for the six possible xi values.
        let mut i_side = [0.0f64; XI_VALUES as usize];
        for (xi, slot) in i_side.iter_mut().enumerate() {
            let diff = (i as i64 - j as i64 + xi as i64).unsigned_abs() as usize + 1;
            *slot = self.pow_neg_gamma[diff];
        }
        let i_pow = self.pow_neg_gamma[i as usize];
        let scale = self.alpha[j as usize] * i_pow;
        let mut row = vec![0.0f64; v];
        let j_i64 = j as i64;
        for k in 1..=v {
            let xi = (mix(prefix ^ (k as u64).wrapping_mul(MIX_K)) % XI_VALUES) as usize;
            let diff = (k as i64 - j_i64 + xi as i64).unsigned_abs() as usize + 1;
            row[k - 1] =
                scale * i_side[xi] * self.pow_neg_gamma[k] * self.pow_neg_gamma[diff];
        }
        row
    }

    /// Normalized conditional distribution p(k | i, j) over k = 1..=V.
    pub fn conditional_row(&self, i: u32, j: u32) -> Vec<f64> {
        let mut row = self.raw_row(i, j);
        let total: f64 = row.iter().sum();
        for w in &mut row {
            *w /= total;
        }
        row
    }

    pub fn check_word(&self, w: u32) -> Result<()> {
        if w == 0 || w as usize > self.vocab_size {
            return Err(Error::Invalid(format!(
                "word id {w} out of range 1..={}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// `alpha(j)`: `(1/50) * log(j+1)/log(51)` for j <= 50, else `1/j`.
pub fn alpha_weight(j: usize) -> f64 {
    assert!(j >= 1, "alpha is defined for j >= 1");
    if j <= 50 {
        (1.0 / 50.0) * ((j as f64) + 1.0).ln() / 51f64.ln()
    } else {
        1.0 / j as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_boundary_values() {
        let world = TrigramWorld::new(1000, 1);
        assert_eq!(world.alpha(50), 0.02);
        assert_eq!(world.alpha(100), 0.01);
        // (1/50) * ln(2) / ln(51), frozen from high-precision evaluation
        assert!((world.alpha(1) - 0.003525828687777642).abs() < 1e-15);
    }

    #[test]
    fn alpha_shape() {
        let world = TrigramWorld::new(1000, 1);
        for j in 1..50u32 {
            assert!(world.alpha(j) <= world.alpha(j + 1), "nondecreasing on 1..50");
        }
        for j in 51..1000u32 {
            assert!(world.alpha(j) > world.alpha(j + 1), "strictly decreasing past 50");
        }
        for j in 1..=1000u32 {
            assert!(world.alpha(j) > 0.0);
        }
    }

    #[test]
    fn xi_deterministic_and_seed_sensitive() {
        let w1 = TrigramWorld::new(1000, 42);
        let w2 = TrigramWorld::new(1000, 43);
        assert_eq!(w1.xi(3, 7, 11), w1.xi(3, 7, 11));
        let mut same = 0usize;
        let n = 10_000usize;
        for t in 0..n {
            let i = (t % 997 + 1) as u32;
            let j = (t % 991 + 1) as u32;
            let k = (t % 983 + 1) as u32;
            if w1.xi(i, j, k) == w2.xi(i, j, k) {
                same += 1;
            }
        }
        // distinct seeds agree only by chance, ~1/6
        let frac = same as f64 / n as f64;
        assert!((frac - 1.0 / 6.0).abs() < 0.02, "cross-seed agreement {frac}");
    }

    #[test]
    fn xi_uniform_over_triples() {
        let world = TrigramWorld::new(1000, 7);
        let mut buckets = [0u64; 6];
        let n = 1_000_000u64;
        let mut t = 0u64;
        'outer: for i in 1..=1000u32 {
            for j in 1..=1000u32 {
                for k in 1..=1000u32 {
                    buckets[world.xi(i, j, k) as usize] += 1;
                    t += 1;
                    if t >= n {
                        break 'outer;
                    }
                }
            }
        }
        for (b, count) in buckets.iter().enumerate() {
            let frac = *count as f64 / n as f64;
            assert!(
                (frac - 1.0 / 6.0).abs() < 0.002,
                "bucket {b} frequency {frac} deviates from 1/6"
            );
        }
    }

    #[test]
    fn beta_values() {
        let world = TrigramWorld::new(1000, 1);
        assert_eq!(world.beta(1, 1, 0), 1.0);
        // 6^-0.75, frozen from high-precision evaluation
        assert!((world.beta(2, 1, 1) - 0.26084743001221455).abs() < 1e-15);
    }

    #[test]
    fn beta_always_positive() {
        let world = TrigramWorld::new(1000, 1);
        for &(a, b, xi) in &[(1u32, 1000u32, 5u8), (1000, 1, 0), (500, 500, 3), (1, 1, 5)] {
            assert!(world.beta(a, b, xi) > 0.0);
        }
    }

    #[test]
    fn conditional_row_normalized_and_deterministic() {
        let world = TrigramWorld::new(1000, 99);
        let row = world.conditional_row(17, 452);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p > 0.0), "rows are strictly positive");
        assert_eq!(row, world.conditional_row(17, 452));

        let other = TrigramWorld::new(1000, 99);
        assert_eq!(row, other.conditional_row(17, 452), "same seed, same rows");
    }

    #[test]
    fn row_mass_reflects_locality() {
        // beta(k, j) decays with k and with |k - j|: conditioned on j = 5 the
        // row puts relatively more mass on small k than conditioned on j = 900.
        let world = TrigramWorld::new(1000, 3);
        let near = world.conditional_row(500, 5);
        let far = world.conditional_row(500, 900);
        let small_mass = |row: &[f64]| row[..50].iter().sum::<f64>();
        assert!(
            small_mass(&near) > small_mass(&far),
            "expected more small-k mass for j=5: {} vs {}",
            small_mass(&near),
            small_mass(&far)
        );
    }

    #[test]
    fn row_matches_brute_force_definition() {
        let world = TrigramWorld::new(200, 5);
        let (i, j) = (37u32, 120u32);
        let row = world.conditional_row(i, j);
        let mut brute = vec![0.0f64; 200];
        for k in 1..=200u32 {
            let xi = world.xi(i, j, k);
            brute[k as usize - 1] =
                world.alpha(j) * world.beta(i, j, xi) * world.beta(k, j, xi);
        }
        let total: f64 = brute.iter().sum();
        for k in 0..200 {
            assert!((row[k] - brute[k] / total).abs() < 1e-15);
        }
    }
}
