//! Seed derivation.
//!
//! Every stochastic operation takes an explicit seed. Independent streams are
//! derived from a base seed and a path of integer tags (round, client id,
//! epoch, ...) so that no generator is ever shared between clients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags used across the crate.
pub mod tag {
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const CLIENT: u64 = 0x434c_4e54;
    pub const LOCAL: u64 = 0x4c4f_4341;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const CORPUS: u64 = 0x434f_5250;
    pub const PERTURB: u64 = 0x5045_5254;
    pub const SERVER: u64 = 0x5345_5256;
    pub const ATTACK: u64 = 0x4154_434b;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from `base` and a path of tags.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(base: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, path))
}
