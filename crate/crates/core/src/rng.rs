//! Deterministic random-number streams.
//!
//! Every source of randomness in the crate derives a dedicated stream from
//! `(seed, tag, parts)` so that results are bit-reproducible regardless of
//! evaluation order or thread count. The mixing function is a fixed splitmix64
//! chain rather than the standard library hasher, whose output is not
//! guaranteed stable across toolchains.

use rand_chacha::rand_core::SeedableRng;

/// The crate-wide RNG. ChaCha8 is fast, seedable and platform-independent.
pub type Prng = rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed, a purpose tag and arbitrary indices into a single u64.
pub fn mix(seed: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut state = seed ^ 0x51ed_270b_a5e3_b1a7;
    let mut acc = splitmix64(&mut state);
    for &b in tag.as_bytes() {
        state ^= b as u64;
        acc ^= splitmix64(&mut state);
    }
    for &p in parts {
        state ^= p;
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Derive an independent RNG stream for `(seed, tag, parts)`.
pub fn stream(seed: u64, tag: &str, parts: &[u64]) -> Prng {
    Prng::seed_from_u64(mix(seed, tag, parts))
}
