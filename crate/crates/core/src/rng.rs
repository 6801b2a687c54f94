//! Deterministic, stream-splittable random source.
//!
//! Every random draw in the crate goes through [`SeededRng`]. A stream is
//! fully determined by its 64-bit seed, and independent child streams are
//! derived statelessly from `(seed, index)`, so parallel work can hand each
//! task its own stream and produce results that do not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seeded random stream backed by ChaCha8.
///
/// `child(i)` derives a new stream from `(seed, i)` alone — it does not
/// depend on how many values the parent has drawn.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer over a (seed, index) pair. Distinct indices map to
/// distinct, well-separated child seeds.
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream number `index`.
    pub fn child(&self, index: u64) -> SeededRng {
        SeededRng::new(mix(self.seed, index))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Single draw from `N(mean, std^2)`.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        debug_assert!(std >= 0.0);
        if std == 0.0 {
            return mean;
        }
        let dist = Normal::new(mean, std).expect("valid normal parameters");
        dist.sample(&mut self.inner)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            slice.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly from `0..n` (partial Fisher-Yates).
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct indices from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.inner.gen_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Tensor of i.i.d. draws from `N(mean, std^2)`; `std = 0` yields the
/// constant `mean` tensor.
pub fn gaussian(rng: &mut SeededRng, shape: Vec<usize>, mean: f64, std: f64) -> Result<Tensor> {
    if !(std >= 0.0) {
        return Err(Error::param(format!("gaussian std must be >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    if shape.is_empty() || n == 0 {
        return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(n);
    if std == 0.0 {
        data.resize(n, mean);
    } else {
        let dist = Normal::new(mean, std).expect("checked parameters");
        for _ in 0..n {
            data.push(dist.sample(&mut rng.inner));
        }
    }
    Tensor::from_vec(shape, data)
}
