//! Seed derivation. Every stochastic component owns a ChaCha stream keyed by a
//! base seed and a path of integers, so results never depend on call order or
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `path` into `base`, yielding a well-separated child seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, path))
}

// stream tags, kept distinct so sibling streams never collide
pub const TAG_INIT: u64 = 1;
pub const TAG_NODE: u64 = 2;
pub const TAG_SITE: u64 = 3;
pub const TAG_PARTITION: u64 = 4;
pub const TAG_TASK: u64 = 5;
pub const TAG_LOCAL: u64 = 6;
pub const TAG_META: u64 = 7;
pub const TAG_CENTRAL: u64 = 8;
pub const TAG_EVAL: u64 = 9;
