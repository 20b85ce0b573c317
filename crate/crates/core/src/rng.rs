//! Seed derivation and random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed. Child seeds
//! come from a splitmix64 mix of `(parent, stream_id)`, so the same seed
//! reproduces the same numbers on every platform and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids used across the crate. Values are part of the reproducibility
/// contract; do not renumber.
pub mod stream {
    pub const PARTICLE_INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DATA_X: u64 = 3;
    pub const DATA_NOISE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const MONTE_CARLO: u64 = 6;
    pub const THOMPSON: u64 = 7;
    pub const ENV_CONTEXT: u64 = 8;
    pub const ENV_REWARD: u64 = 9;
    pub const ENV_WEIGHTS: u64 = 10;
    pub const UNIFORM_AGENT: u64 = 11;
    pub const STUDY: u64 = 12;
    pub const TEACHER: u64 = 13;
}

/// One round of the splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed for `stream` from `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}
