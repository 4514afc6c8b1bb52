//! Seeded random streams.
//!
//! Every consumer of randomness asks for a stream keyed by `(seed, purpose, index)`.
//! Streams for different purposes never share state, so e.g. the noise-variance
//! draws are unaffected by how many proposals the chain makes, and per-draw work
//! can run in parallel without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream identifiers. Kept stable so that outputs stay reproducible across versions.
pub mod purpose {
    pub const LHD: u64 = 1;
    pub const GASP_STARTS: u64 = 2;
    pub const SIGMA2: u64 = 3;
    pub const CHAIN: u64 = 4;
    pub const BIAS_DRAW: u64 = 5;
    pub const MODEL_DRAW: u64 = 6;
    pub const FIELD_NOISE: u64 = 7;
    pub const EXTRAP_SAME_TYPE: u64 = 8;
    pub const EXTRAP_NEW_NOMINALS: u64 = 9;
    pub const SYNTH: u64 = 10;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: u64, index: u64) -> StreamRng {
    let mut state = seed;
    let _ = splitmix64(&mut state);
    state ^= purpose.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let _ = splitmix64(&mut state);
    state ^= index.wrapping_mul(0xA076_1D64_78BD_642F);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
