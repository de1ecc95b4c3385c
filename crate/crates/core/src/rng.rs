//! Seed splitting.
//!
//! A user seed and a stream index are mixed with SplitMix64 into the 32-byte
//! key of a ChaCha8 generator, so each consumer draws from its own stream and
//! adding workers never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream index for ground-truth parameters.
pub const STREAM_TRUTH: u64 = 0;
/// Stream index for simulated data.
pub const STREAM_DATA: u64 = 1;
/// Stream index for fold assignment.
pub const STREAM_FOLDS: u64 = 2;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut state = seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
