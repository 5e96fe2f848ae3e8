//! Seed derivation.
//!
//! All randomness uses ChaCha8 (`rand_chacha::ChaCha8Rng`). Child seeds are
//! derived from a root seed and a path of integer labels with the
//! SplitMix64 finalizer, so a stream depends only on its label path and
//! never on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a label path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &label| splitmix(acc ^ splitmix(label)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

// Stream labels.
pub(crate) const STREAM_STUB: u64 = 1;
pub(crate) const STREAM_HINGE: u64 = 2;
pub(crate) const STREAM_HEAD: u64 = 3;
pub(crate) const STREAM_ADAPTER: u64 = 4;
pub(crate) const STREAM_LORA: u64 = 5;
pub(crate) const STREAM_DATA: u64 = 6;
pub(crate) const STREAM_SHUFFLE: u64 = 7;
pub(crate) const STREAM_AUGMENT: u64 = 8;
pub(crate) const STREAM_SPLIT: u64 = 9;
