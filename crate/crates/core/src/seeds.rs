//! Deterministic seed derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream whose seed
//! is derived from one root seed plus a purpose tag, so independent stages
//! never share a stream and a run is reproducible from its root seed alone.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// FNV-1a over the tag bytes; stable across platforms and releases, unlike
/// `std::hash::DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a purpose tag.
pub fn mix(seed: u64, tag: &str) -> u64 {
    splitmix(seed ^ fnv1a(tag.as_bytes()))
}

/// Derives a child seed indexed by a counter (epoch, step, sample id, ...).
pub fn mix_n(seed: u64, tag: &str, n: u64) -> u64 {
    splitmix(mix(seed, tag) ^ splitmix(n))
}

/// A seeded ChaCha generator for the given root seed and tag.
pub fn rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag))
}

/// A seeded ChaCha generator for the given root seed, tag and counter.
pub fn rng_n(seed: u64, tag: &str, n: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_n(seed, tag, n))
}
