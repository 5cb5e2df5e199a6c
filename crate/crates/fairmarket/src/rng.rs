//! Seed derivation for reproducible sub-streams.
//!
//! All randomness flows from one master seed. Each (episode, agent, purpose)
//! combination gets its own ChaCha stream so any single episode can be
//! replayed in isolation and rollout workers never share generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purpose tags used when deriving sub-streams.
pub mod stream {
    pub const WEATHER: u64 = 1;
    pub const LOAD: u64 = 2;
    pub const PV: u64 = 3;
    pub const FORECAST: u64 = 4;
    pub const POLICY: u64 = 5;
    pub const INIT: u64 = 6;
    pub const EPISODE: u64 = 7;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a deterministic RNG from a master seed and a tag path.
///
/// Different tag paths yield statistically independent streams; the same
/// path always yields the same stream.
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = master ^ 0xA076_1D64_78BD_642F;
    let mut mixed = splitmix64(&mut state);
    for &tag in tags {
        state = mixed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        mixed = splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Derive the sub-seed for one training episode.
pub fn episode_seed(master: u64, episode: u64) -> u64 {
    let mut state = master ^ 0xA076_1D64_78BD_642F;
    let _ = splitmix64(&mut state);
    state ^= stream::EPISODE.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ episode;
    splitmix64(&mut state)
}
