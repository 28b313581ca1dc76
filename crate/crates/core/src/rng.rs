//! Deterministic RNG derivation. Every random draw in the crate flows from an
//! explicit seed plus a stream tag, so reruns and resumed runs are bit-equal.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby (seed, stream) pairs.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Independent generator for (`seed`, `stream`) and optional substream parts.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed);
    for &p in parts {
        state = mix(state ^ mix(p));
    }
    let mut key = [0u8; 32];
    let mut x = state;
    for chunk in key.chunks_mut(8) {
        x = mix(x);
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
