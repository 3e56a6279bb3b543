//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), seeded
//! with the user seed and switched to a fixed stream number per purpose, so
//! that e.g. batch order does not shift when the initialization changes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream numbers.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const TEST_DATA: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const CORRUPTION: u64 = 5;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    epoch_stream(seed, stream, 0)
}

/// Stream for one epoch of a per-epoch process (e.g. batch shuffling).
///
/// The 256-bit ChaCha key is `seed ‖ stream ‖ epoch ‖ 0`, each little-endian.
pub fn epoch_stream(seed: u64, stream_id: u64, epoch: usize) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream_id.to_le_bytes());
    key[16..24].copy_from_slice(&(epoch as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
