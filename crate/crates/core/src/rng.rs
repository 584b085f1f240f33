//! Seed derivation for reproducible random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream keyed by a base
//! seed plus a stream id, so item `i` of a batch does not depend on how many
//! items were drawn before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name and version of the generator; recorded in reports.
pub const RNG_NAME: &str = "chacha8/splitmix64-v1";

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a domain tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod tags {
    pub const PRIOR: u64 = 1;
    pub const DEMANDS: u64 = 2;
    pub const LIMITS: u64 = 3;
    pub const PLACEMENT: u64 = 4;
    pub const POLICY_INIT: u64 = 10;
    pub const ROLLOUT: u64 = 11;
    pub const TRAIN_INSTANCES: u64 = 12;
    pub const TIE_BREAK: u64 = 13;
    pub const RANDOM_ORDERS: u64 = 14;
}
