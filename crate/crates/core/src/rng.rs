//! Seeded randomness.
//!
//! Every stochastic operation takes an explicit `&mut Rng`. The generator is
//! ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with `seed_from_u64`, so a run
//! is reproducible bit-for-bit from its `u64` seed on any platform.
//! Independent streams are derived with [`stream`], which mixes the parent
//! seed with a stream id through SplitMix64.

use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

use crate::Scalar;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent generator for sub-task `id` of a run seeded with `seed`.
pub fn stream(seed: u64, id: u64) -> Rng {
    seeded(derive_seed(seed, id))
}

/// The seed behind [`stream`]`(seed, id)`.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    splitmix64(seed ^ splitmix64(id.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn normal<T: Scalar>(rng: &mut Rng) -> T {
    T::of(rng.sample::<f64, _>(StandardNormal))
}

/// Uniform on `[0, 1)`.
pub fn uniform<T: Scalar>(rng: &mut Rng) -> T {
    T::of(rng.random::<f64>())
}

pub fn normal_matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || normal(rng))
}

pub fn bernoulli(p: f64, rng: &mut Rng) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

pub fn index(n: usize, rng: &mut Rng) -> usize {
    rng.random_range(0..n)
}
