//! Seed derivation. Every stochastic stage owns a generator derived from
//! `(root seed, stream, index)`, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a stream tag and an index into a new seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)).wrapping_add(index))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(seed: u64, stream: u64, index: u64) -> Rng {
    rng_from(derive_seed(seed, stream, index))
}

/// Stream tags, kept in one place so no two stages collide.
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const POSTTRAIN: u64 = 4;
    pub const CANDIDATE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const ORACLE: u64 = 8;
}
