//! Seeded, splittable randomness.
//!
//! Every stochastic operation takes an explicit `&mut Rng`. Independent
//! streams are derived by hashing a parent seed with a path of integer keys,
//! so two callers that agree on the keys consume identical noise regardless
//! of the order in which they ask for it.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a key path into a new seed.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    let mut h = splitmix(base);
    for &k in keys {
        h = splitmix(h ^ splitmix(k.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// A fresh generator for the substream named by `keys` under `base`.
pub fn substream(base: u64, keys: &[u64]) -> Rng {
    seeded(derive_seed(base, keys))
}

/// Draws a seed for a child stream from `rng`.
pub fn fork(rng: &mut Rng) -> u64 {
    rng.random()
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo..hi)
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
