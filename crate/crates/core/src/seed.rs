//! Seed derivation. Every random stream in the toolkit is a ChaCha8 generator
//! seeded from a (base, tag) pair, so streams are independent of thread
//! scheduling and of the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix64(mix64(base) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_from(base: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

/// Stable 64-bit tag for a string label (FNV-1a).
pub fn tag_of(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
