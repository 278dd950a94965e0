//! Keyed random sub-streams.
//!
//! Every stochastic draw in the crate comes from a ChaCha stream whose seed is
//! derived from a master seed and a tuple of integer keys (epoch, step, split
//! index, sample index, ...). Two draws with the same key path are identical
//! regardless of the order or thread in which they are produced.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Real;

pub type Stream = ChaCha12Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a key path into a single 64-bit seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6C70_665F_7367_6400);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x1234_5678)));
    }
    h
}

/// A ChaCha stream for `(seed, keys...)`.
pub fn stream(seed: u64, keys: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(seed, keys))
}

/// Draws `n` standard normal values. Samples are drawn in `f64` and rounded,
/// so `f32` and `f64` runs see the same underlying noise.
pub fn standard_normal_vec<T: Real>(rng: &mut Stream, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut Stream, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
