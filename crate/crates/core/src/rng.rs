//! Labelled random streams derived from one run seed.
//!
//! Each consumer (parameter init, shuffling, data generation, ...) asks for
//! its own stream by label, so adding draws in one place never shifts the
//! numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Platform-independent 64-bit seed for `(seed, label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(seed) ^ h)
}

pub fn stream(seed: u64, label: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Stream for the `index`-th item of a labelled family (e.g. one per sample).
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(derive_seed(seed, label) ^ splitmix64(index)))
}
