//! Seed plumbing.
//!
//! Every component seed is derived from one master seed:
//! `derive(master, stream) = splitmix64(master ^ splitmix64(stream))`.
//! Stream identifiers are small constants (see [`streams`]) or per-item
//! indices offset from them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One step of the splitmix64 generator (Steele, Lea, Flood).
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub mod streams {
    pub const TRAIN_SCENES: u64 = 1;
    pub const EVAL_SCENES: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN_LOOP: u64 = 4;
    pub const SAMPLER: u64 = 5;
    pub const BASELINE: u64 = 6;
}
