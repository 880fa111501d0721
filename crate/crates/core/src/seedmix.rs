//! Deterministic derivation of independent RNG streams from a master seed.
//!
//! Streams are keyed by a purpose tag plus two indices (typically party and
//! round), so that consumers of one stream cannot perturb another and
//! parallel schedules cannot change any draw.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stable 64-bit mix of the master seed, a purpose tag, and two indices.
pub fn mix(seed: u64, tag: &str, a: u64, b: u64) -> u64 {
    // FNV-1a over the tag bytes keeps the tag dimension order-sensitive.
    let mut h: u64 = 0xcbf29ce484222325;
    for &byte in tag.as_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = splitmix64(seed ^ h);
    z = splitmix64(z ^ a);
    splitmix64(z ^ b)
}

/// ChaCha stream for the given key; identical inputs yield identical draws
/// on every platform.
pub fn stream(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag, a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = stream(42, "adv", 1, 3);
        let mut b = stream(42, "adv", 1, 3);
        let va: f64 = a.random();
        let vb: f64 = b.random();
        assert_eq!(va, vb);

        let mut c = stream(42, "adv", 1, 4);
        let vc: f64 = c.random();
        assert_ne!(va, vc);

        let mut d = stream(42, "data", 1, 3);
        let vd: f64 = d.random();
        assert_ne!(va, vd);
    }
}
