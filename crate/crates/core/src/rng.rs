//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by an explicit tuple, so any step can be replayed in
//! isolation (which is what makes checkpoint resumption exact).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stable tags for the independent streams.
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const LABELED_BATCH: u64 = 3;
    pub const UNLABELED_BATCH: u64 = 4;
    pub const CONTRASTIVE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const VALIDATION: u64 = 7;
}
