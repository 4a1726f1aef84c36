//! Seed derivation. Every stochastic component draws from a ChaCha stream
//! whose seed is derived from the experiment seed plus a purpose tag, so
//! results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a sequence of tags.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng_for(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, tags))
}

/// Stable tags for the different random streams.
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const LAYOUT: u64 = 2;
    pub const SPAWN: u64 = 3;
    pub const RENDER: u64 = 4;
    pub const POLICY: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const INIT: u64 = 8;
    pub const PPO: u64 = 9;
    pub const EPISODE: u64 = 10;
    pub const SUBSAMPLE: u64 = 11;
}
