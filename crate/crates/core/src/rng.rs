//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`SeededRng`]: a ChaCha8 stream
//! keyed by a 64-bit seed, with normals produced by the Box–Muller transform
//! from 53-bit uniforms. Both pieces are platform independent, so a seed fully
//! determines the sequence.
//!
//! Child seeds are derived with [`derive_seed`], which folds a worker id and a
//! purpose tag into the master seed through the SplitMix64 finalizer.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tags used for seed splitting.
pub mod tag {
    pub const DATA: u64 = 0x01;
    pub const SHARD: u64 = 0x02;
    pub const BATCH: u64 = 0x03;
    pub const INIT: u64 = 0x04;
    pub const COMPRESSOR: u64 = 0x05;
    pub const ATTACK: u64 = 0x06;
    pub const IMAGE: u64 = 0x07;
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(master, id, tag)`.
pub fn derive_seed(master: u64, id: u64, tag: u64) -> u64 {
    let a = mix64(master.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let b = mix64(a ^ id.wrapping_mul(0xd1b5_4a32_d192_ed03));
    mix64(b ^ tag.wrapping_mul(0x8cb9_2ba7_2f3d_8dd7))
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Stream for `(master, id, tag)`, see [`derive_seed`].
    pub fn derived(master: u64, id: u64, tag: u64) -> Self {
        Self::new(derive_seed(master, id, tag))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal via Box–Muller; the second variate of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * theta.sin());
        radius * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_seeds_separate_purposes() {
        let s = [
            derive_seed(7, 0, tag::DATA),
            derive_seed(7, 1, tag::DATA),
            derive_seed(7, 0, tag::BATCH),
            derive_seed(8, 0, tag::DATA),
        ];
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
