//! Seed derivation. Every independent random stream in the crate comes from
//! `stream(master, index)` so results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, index))
}

// Stream namespaces, kept far apart from per-scene indices.
pub(crate) const PROTOTYPES: u64 = u64::MAX;
pub(crate) const MODEL_INIT: u64 = u64::MAX - 1;
pub(crate) const SHUFFLE: u64 = u64::MAX - 2;
pub(crate) const EXEMPLARS: u64 = u64::MAX - 3;
pub(crate) const HEAD_GROWTH: u64 = u64::MAX - 4;
