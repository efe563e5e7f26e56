//! Seed-derived random streams.
//!
//! Every random draw in the crate comes from a stream keyed by a tuple such as
//! `(seed, purpose, epoch, example, draw)`, so results never depend on batch
//! order or on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

/// Purpose tags mixed into derived seeds.
pub mod purpose {
    pub const FROZEN_INIT: u64 = 0x11;
    pub const PROMPT_INIT: u64 = 0x12;
    pub const SHUFFLE: u64 = 0x21;
    pub const TRAIN_NOISE: u64 = 0x22;
    pub const INFER_NOISE: u64 = 0x31;
    pub const TASK: u64 = 0x41;
    pub const SPLIT: u64 = 0x42;
    pub const HEAD_FIT: u64 = 0x43;
    pub const GRADCHECK: u64 = 0x51;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a tuple of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5641_4D50_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Independent stream for the given key tuple.
pub fn stream(parts: &[u64]) -> RngStream {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
