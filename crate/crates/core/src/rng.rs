//! Seed derivation. Every random stream in the pipeline is keyed off one master
//! seed plus a tuple of tags, so no generator state ever needs to be saved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hash `master` and `tags` into an independent 64-bit seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(master), |acc, &t| {
        splitmix64(acc ^ splitmix64(t))
    })
}

pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

// Stream domains, kept distinct so no two uses of a master seed collide.
pub(crate) const DOMAIN_SHUFFLE: u64 = 1;
pub(crate) const DOMAIN_AUGMENT: u64 = 2;
pub(crate) const DOMAIN_LAMBDA: u64 = 3;
pub(crate) const DOMAIN_SYNTHETIC: u64 = 4;
pub(crate) const DOMAIN_INIT: u64 = 5;
pub(crate) const DOMAIN_EVAL: u64 = 6;
