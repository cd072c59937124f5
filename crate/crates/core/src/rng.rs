//! Seed plumbing. Every random draw in the crate comes from a ChaCha stream
//! keyed by an explicit seed, so runs replay bit-for-bit on any platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `(base, tag)`.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix(mix(base ^ 0x9e37_79b9_7f4a_7c15).wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Derives a seed from a path of tags, e.g. `(epoch, route)`.
pub fn derive_path(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(base, |s, &t| derive_seed(s, t))
}
