//! Seeded, forkable randomness.
//!
//! Every stochastic corner of the crate (weight init, dataset synthesis,
//! batch order, randomized trials) draws from this one wrapper around a
//! ChaCha8 stream, so identical seeds give bit-identical behavior across runs
//! and platforms.
//!
//! [`Rng::fork`] derives an independent child stream from the *seed* and a
//! tag, never from the current draw position. Layers seeded by name therefore
//! get identical weights no matter in which order they are allocated, and
//! dataset images can be synthesized independently of each other.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The seed this stream was created from (not the current position).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent stream from this stream's seed and a tag.
    pub fn fork(&self, tag: &str) -> Rng {
        Rng::seeded(splitmix64(self.seed ^ fnv1a64(tag.as_bytes())))
    }

    /// Uniform draw from the closed interval `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..=hi)
    }

    /// Gaussian draw.
    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        Normal::new(mean, sd).expect("sd must be finite and non-negative").sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, values: &mut [T]) {
        for i in (1..values.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            values.swap(i, j);
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
