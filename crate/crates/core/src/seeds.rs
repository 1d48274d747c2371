//! Deterministic derivation of independent random streams.
//!
//! Every stochastic operation in the crate takes an explicit stream; the
//! helpers here derive child streams from a base seed and a tag list so
//! that parallel work (episodes within a step, tasks within an eval run)
//! gets statistically independent, reproducible randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded random stream used throughout the crate.
pub type Stream = ChaCha8Rng;

/// SplitMix64 finalizer; good avalanche for cheap seed mixing.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a single derived seed.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(base);
    for &t in tags {
        acc = splitmix(acc ^ splitmix(t));
    }
    acc
}

/// Returns a fresh stream for `(base, tags)`.
pub fn stream(base: u64, tags: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}
