//! Seed derivation. Every random stream in the crate is a ChaCha generator
//! keyed by mixing a base seed with a fixed tag and a tuple of indices, so
//! streams never alias and workers never share a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `base` with a tag and any number of indices into a new 64-bit seed.
pub fn derive(base: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ 0x6D62_615F_7365_6564);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn rng(base: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, parts))
}
