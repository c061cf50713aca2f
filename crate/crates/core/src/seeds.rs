//! Stateless seed derivation so every random draw is addressable by
//! `(seed, tags...)` and a resumed run replays the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

// Stream tags.
pub const TAG_TEMPLATE: u64 = 1;
pub const TAG_SAMPLE: u64 = 2;
pub const TAG_INIT: u64 = 3;
pub const TAG_SHUFFLE: u64 = 4;
pub const TAG_SPLIT: u64 = 5;
pub const TAG_ADVERSARY: u64 = 6;
pub const TAG_AUGMENT: u64 = 7;
pub const TAG_PAIRS: u64 = 8;
pub const TAG_DEGRADE: u64 = 9;
