//! Seed derivation. Every stochastic stage draws from a generator seeded by
//! `(base seed, stage label, index)`, so results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive(base: u64, label: &str, index: u64) -> u64 {
    splitmix(splitmix(base ^ fnv(label)) ^ splitmix(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn derive_str(base: u64, label: &str, key: &str) -> u64 {
    derive(base, label, fnv(key))
}

pub fn rng(base: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, label, index))
}

pub fn rng_for(base: u64, label: &str, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_str(base, label, key))
}
