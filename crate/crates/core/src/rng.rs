//! Seed derivation. Every random stream in a run is a pure function of a
//! base seed and a small tuple of counters, so a run can be resumed from any
//! step without serializing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from a base seed and a stream path.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}

/// Stream tags, so unrelated consumers of the same base seed never collide.
pub mod tag {
    pub const SHUFFLE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const KMEANS: u64 = 3;
    pub const MIX: u64 = 4;
    pub const INIT: u64 = 5;
    pub const CROP: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const PROBE: u64 = 8;
}
