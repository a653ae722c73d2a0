//! Deterministic RNG stream derivation.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from the run seed plus a purpose tag and indices. Derivation is a pure
//! function, so initialization, shuffling, and sampling are reproducible
//! regardless of thread or shard layout.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. The discriminant goes into the key derivation, so the
/// order here is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ParamInit = 1,
    Shuffle = 2,
    Batch = 3,
    EvalSample = 4,
    EvalNegatives = 5,
    DataGen = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `seed`, the stream tag, and two indices into a 256-bit ChaCha seed.
pub fn stream(seed: u64, purpose: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x6b67_6e6e_7365_6564); // "kgnnseed"
    state = splitmix64(state ^ purpose as u64);
    state = splitmix64(state ^ a);
    state = splitmix64(state ^ b);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit mix used by the shard map.
pub fn mix64(x: u64) -> u64 {
    splitmix64(x)
}
