//! Seed derivation.
//!
//! Every random stream in a run is a ChaCha8 generator seeded from a master
//! seed and a short path of integer tags (device id, stream purpose, ...).
//! Tags are folded in with the SplitMix64 finalizer, so distinct paths give
//! unrelated streams and the same path always gives the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes used by the library. Values are part of the reproducibility
/// contract and must never change.
pub mod stream {
    pub const CLASS_MEANS: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const LABEL_NOISE: u64 = 3;
    pub const PARTITION: u64 = 10;
    pub const TEST_SPLIT: u64 = 11;
    pub const INIT: u64 = 20;
    pub const WARMUP: u64 = 21;
    pub const TRAIN: u64 = 22;
    pub const RANDOM_MASK: u64 = 23;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `tags` into `seed`.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| {
        splitmix64(acc.rotate_left(23) ^ splitmix64(t.wrapping_add(0x5851_F42D_4C95_7F2D)))
    })
}

pub fn rng(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
