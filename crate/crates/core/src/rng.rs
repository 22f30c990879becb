//! Deterministic seeded randomness.
//!
//! A single master seed fans out into independent named substreams
//! (dataset blocks, weight init, shuffles, MIA folds, Monte Carlo trials),
//! so any pipeline stage can be reproduced in isolation. Streams are keyed
//! by `(master seed, domain label, index)` and mixed with SplitMix64 into a
//! ChaCha8 seed. Two runs with the same master seed are bit-identical on the
//! same build; cross-machine bit-exactness is not a goal.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier recorded in dataset manifests so a corpus file documents how
/// its randomness was derived.
pub const PRNG_ID: &str = "chacha8/splitmix64-v1";

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive the substream `(domain, index)` of a master seed.
pub fn substream(master_seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut state = master_seed ^ fnv1a(domain.as_bytes()).rotate_left(17) ^ index.wrapping_mul(0xA24B_AED4_963E_E407);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
