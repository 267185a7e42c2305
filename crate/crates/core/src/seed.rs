//! Deterministic seed derivation. Every random draw in the crate comes from a
//! ChaCha stream keyed by a seed derived here, so results depend only on the
//! global seed and the coordinates of the draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent uses of the same coordinates apart.
pub mod stream {
    pub const MASK: u64 = 0x6d61_736b;
    pub const INIT: u64 = 0x696e_6974;
    pub const TRAIN_POOL: u64 = 0x7470_6f6f;
    pub const EVAL_POOL: u64 = 0x6570_6f6f;
    pub const TRAIN_BATCHES: u64 = 0x7462_6174;
    pub const EVAL_SET: u64 = 0x6576_616c;
    pub const LAYER: u64 = 0x6c61_7972;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
