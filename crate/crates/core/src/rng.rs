//! Deterministic RNG construction.
//!
//! All stochastic code paths take a seed and derive a [`ChaCha8Rng`] from it,
//! so results are reproducible across platforms and releases. Sub-streams
//! (per student, per episode, per benchmark cell) are derived by mixing the
//! base seed with a stream index through splitmix64 rather than by sharing a
//! single sequential generator, which keeps streams independent of iteration
//! order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 output function. Good avalanche behaviour,
/// stable forever, and cheap; used only for seed derivation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// RNG for the given seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream `index` of `seed`.
pub fn rng_stream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}
