//! Seed derivation for reproducible runs.
//!
//! A run starts from one 64-bit master seed. Every stochastic operation
//! receives its own stream, derived from the master seed and a tag, so adding
//! a draw in one place never shifts the numbers seen anywhere else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `tag` under `parent`.
pub fn derive(parent: u64, tag: u64) -> u64 {
    mix(mix(parent) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Child seed for a string label, e.g. `"corpus"` or `"epoch-view"`.
pub fn derive_label(parent: u64, label: &str) -> u64 {
    // FNV-1a; stable across platforms and toolchains.
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    derive(parent, h)
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}
