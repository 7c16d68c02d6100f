//! Keyed random streams.
//!
//! Every stochastic choice in a run draws from a generator whose seed is a
//! pure function of a key tuple such as `(global_seed, tag, client, task,
//! round)`. Results therefore do not depend on how work is scheduled across
//! threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_DATA: u64 = 1;
pub const TAG_PARTITION: u64 = 2;
pub const TAG_MEMORY: u64 = 3;
pub const TAG_INIT: u64 = 4;
pub const TAG_LOCAL: u64 = 5;
pub const TAG_MEMORY_BATCH: u64 = 6;
pub const TAG_HOLDOUT: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn keyed_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
