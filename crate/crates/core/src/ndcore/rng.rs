//! Seeded randomness.
//!
//! The bit stream comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), whose output
//! for a given 64-bit seed is fixed by the ChaCha specification and stable
//! across platforms. Uniform doubles take the top 53 bits of a `u64` draw.
//! Standard normals use the Box–Muller transform on consecutive uniform pairs
//! `(u1, u2)` with `u1 ∈ (0, 1]`:
//!
//! ```text
//! r = sqrt(-2 ln u1),  θ = 2π u2,  n0 = r cos θ,  n1 = r sin θ
//! ```
//!
//! Both outputs of a pair are used, filling tensors in row-major order. An odd
//! trailing element consumes a full pair and discards `n1`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor2;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// One Box–Muller pair.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }
}

/// `rows x cols` tensor of i.i.d. standard normal draws.
pub fn sample_standard_normal(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor2 {
    let n = rows * cols;
    let mut data = Vec::with_capacity(n + 1);
    while data.len() < n {
        let (a, b) = rng.normal_pair();
        data.push(a);
        data.push(b);
    }
    data.truncate(n);
    Tensor2::from_vec(rows, cols, data).expect("Box-Muller output is finite")
}

/// Derives an independent stream seed from a base seed and a stream tag
/// using the SplitMix64 finalizer.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_first_value_is_frozen() {
        // Frozen from a single run of the generator.
        let mut rng = SeededRng::new(42);
        let t = sample_standard_normal(1, 2, &mut rng);
        assert_eq!(t.get(0, 0).to_bits(), FIRST_NORMAL_SEED_42);
    }

    const FIRST_NORMAL_SEED_42: u64 = 4_609_165_146_906_686_528;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        for _ in 0..10_000 {
            assert_eq!(a.next_f64().to_bits(), b.next_f64().to_bits());
        }
        let x = sample_standard_normal(3, 5, &mut SeededRng::new(9));
        let y = sample_standard_normal(3, 5, &mut SeededRng::new(9));
        assert!(x.bit_eq(&y));
    }

    #[test]
    fn normal_moments() {
        let mut rng = SeededRng::new(2024);
        let t = sample_standard_normal(1, 100_000, &mut rng);
        let n = t.data().len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..100).map(|i| derive_seed(5, i)).collect();
        assert_eq!(s.len(), 100);
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
