//! Deterministic, splittable random number streams.
//!
//! Every chain owns its own generator derived from `(seed, chain_id, stream)`.
//! Results therefore depend only on those identifiers, never on thread
//! scheduling or shard layout.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags, kept distinct so a chain's step noise, its denoiser noise
/// and its initial draws never alias.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_STEP_NOISE: u64 = 1;
pub const STREAM_DENOISER: u64 = 2;
pub const STREAM_DATA: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent generator for `(seed, chain_id, stream)`.
pub fn stream_rng(seed: u64, chain_id: u64, stream: u64) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x6a09e667f3bcc908);
    state = splitmix64(state ^ chain_id);
    state = splitmix64(state ^ stream.wrapping_mul(0x9e3779b97f4a7c15));
    let mut key = [0u8; 32];
    let mut z = state;
    for chunk in key.chunks_mut(8) {
        z = splitmix64(z);
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
