//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of labels into a child seed of `seed`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &label| mix(acc ^ mix(label)))
}

/// Generator for stream `path` under `seed`. Streams with different paths
/// are statistically independent and never depend on each other's draws.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Labels that keep the purposes of derived streams apart.
pub mod domain {
    pub const PERMUTATION: u64 = 1;
    pub const SUBSAMPLE: u64 = 2;
    pub const HALF_NORMAL: u64 = 3;
    pub const DATASET: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const SCHEDULE: u64 = 6;
    pub const SELECTION: u64 = 7;
    pub const FOLDS: u64 = 8;
}
