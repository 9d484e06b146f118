//! Deterministic seeding. Every consumer derives its stream from one root seed
//! and a fixed label, so adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream labels used across the crate.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SAMPLING: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const DATA: u64 = 4;
}

/// SplitMix64 finalizer; decorrelates (seed, label, index) triples.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, label: u64, index: u64) -> u64 {
    mix(mix(root ^ mix(label)) ^ index)
}

pub fn rng_for(root: u64, label: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label, index))
}
