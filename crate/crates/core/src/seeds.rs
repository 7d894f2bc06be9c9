//! Seed derivation shared by data generation and training.
//!
//! Every stochastic choice draws from a `ChaCha8Rng` seeded with a value
//! derived from the global seed through SplitMix64 finalizers, so a run is
//! reproducible from `(seed, epoch, index)` alone:
//!
//! `derive_seed(g, e, i) = mix(mix(mix(g) ^ e) ^ i)`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(global: u64, epoch: u64, index: u64) -> u64 {
    mix(mix(mix(global) ^ epoch) ^ index)
}

/// Seed of item `index` in `epoch` of a named stream.
pub fn stream_seed(global: u64, stream: u64, epoch: u64, index: u64) -> u64 {
    derive_seed(derive_seed(global, stream, 0), epoch, index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named sub-streams of a global seed.
pub mod stream {
    pub const INIT: u64 = 0x1;
    pub const SHUFFLE: u64 = 0x2;
    pub const SUBSAMPLE: u64 = 0x3;
    pub const SCENE: u64 = 0x4;
    pub const SPLIT: u64 = 0x5;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_spreads() {
        assert_eq!(derive_seed(7, 1, 2), derive_seed(7, 1, 2));
        assert_ne!(derive_seed(7, 1, 2), derive_seed(7, 2, 1));
        assert_ne!(derive_seed(7, 0, 0), derive_seed(8, 0, 0));
        assert_ne!(stream_seed(7, stream::SHUFFLE, 0, 0), stream_seed(7, stream::SUBSAMPLE, 0, 0));
        // frozen so that runs stay reproducible across versions
        assert_eq!(mix(0), 0xE220_A839_7B1D_CDAF);
    }
}
