// SPDX-License-Identifier: Apache-2.0

//! Seed derivation. Every random stream in the crate is a ChaCha8 generator keyed by
//! a 64-bit seed derived from the run seed, a stream tag and an index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed for `(tag, index)` from a parent seed.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ tag_hash(tag)) ^ index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    rng(derive(seed, tag, index))
}
