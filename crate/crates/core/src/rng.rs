//! Seeded, stream-splittable random source.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Well-known stream ids so independent consumers of one seed never overlap.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const CIPHER: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const TEACHER_INIT: u64 = 10;
    pub const STUDENT_INIT: u64 = 11;
    pub const SHUFFLE: u64 = 20;
    pub const LANGUAGE_MIX: u64 = 21;
    pub const FIXTURE: u64 = 99;
}

/// ChaCha8 generator addressed by `(seed, stream)`.
///
/// The same pair yields the same sequence on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std)
            .expect("std must be finite and non-negative")
            .sample(&mut self.inner)
    }

    /// Normal sample rejected outside two standard deviations.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal(0.0, 1.0);
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, spelled out so the sequence is pinned to `below`.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
