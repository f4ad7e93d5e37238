//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a base seed and a short tag path, so results do not
//! depend on the order in which independent jobs run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a tag path.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// Stable tags for the different random streams.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const ROUND: u64 = 5;
    pub const CLIENT: u64 = 6;
    pub const DEFENSE: u64 = 7;
    pub const ATTACK: u64 = 8;
    pub const EVALNET: u64 = 9;
    pub const SPLIT: u64 = 10;
}
