//! Seed derivation.
//!
//! Every random draw in the crate descends from one root seed. Subsystems get
//! their own stream tag, and per-item generators are keyed by the item's
//! coordinates (epoch, exam index, crop index, ...) so results never depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams split from a root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Dropout = 3,
    Tta = 4,
    Shuffle = 5,
    Subsample = 6,
    InputNoise = 7,
    Synthetic = 8,
    Cohort = 9,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: Stream, parts: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ splitmix64(stream as u64));
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream_rng(root: u64, stream: Stream, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, parts))
}

/// Uniform value in `[0, 1)` from a counter-based hash.
pub fn hash_unit(seed: u64, counter: u64) -> f64 {
    (splitmix64(seed ^ splitmix64(counter)) >> 11) as f64 / (1u64 << 53) as f64
}
