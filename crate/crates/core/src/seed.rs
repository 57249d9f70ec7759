//! Per-purpose seed derivation.
//!
//! A single user seed drives every random decision. Each consumer derives
//! its own stream with [`derive`] so that, for example, adding a K-means run
//! never shifts the samples drawn for the corpus.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    GroundTruth = 2,
    Corpus = 3,
    Heldout = 4,
    KMeans = 5,
    Decode = 6,
    Sampling = 7,
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, purpose: Purpose) -> u64 {
    mix(seed ^ mix(purpose as u64))
}

/// Seed for the `index`-th independent item (trial, sequence, sweep cell).
pub fn derive_indexed(seed: u64, index: u64) -> u64 {
    mix(mix(seed).wrapping_add(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
