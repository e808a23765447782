//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a seed derived from the run seed and a path of stream labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_at(seed: u64, path: &[u64]) -> ChaCha8Rng {
    rng(derive(seed, path))
}

/// Stream labels.
pub mod stream {
    pub const TRAIN: u64 = 1;
    pub const TEST: u64 = 2;
    pub const AUG: u64 = 3;
    pub const DETECT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const MIX: u64 = 7;
    pub const FRESH: u64 = 8;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_separate_streams() {
        assert_ne!(derive(1, &[1]), derive(1, &[2]));
        assert_ne!(derive(1, &[1, 2]), derive(1, &[2, 1]));
        assert_eq!(derive(7, &[3, 4]), derive(7, &[3, 4]));
    }
}
