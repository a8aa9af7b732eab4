//! Seed handling. Every stochastic routine takes an explicit `u64` seed and
//! derives independent sub-streams from it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type UtgRng = ChaCha8Rng;

pub fn rng(seed: u64) -> UtgRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `(seed, stream)`; used for per-record and
/// per-chain seeds.
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
