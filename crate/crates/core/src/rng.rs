//! Deterministic seed splitting.
//!
//! Every random stream in a run is derived from the run seed and a short path
//! of labels (loop index, image id, worker id...). A child seed is
//! `splitmix64(parent ^ fnv1a64(label))`, applied once per path component, so
//! streams are independent of iteration order and of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a child seed from `parent` and one label.
pub fn derive(parent: u64, label: impl AsRef<[u8]>) -> u64 {
    splitmix64(parent ^ fnv1a64(label.as_ref()))
}

/// Derives a child seed from a path of labels.
pub fn derive_path(parent: u64, path: &[&str]) -> u64 {
    path.iter().fold(parent, |s, p| derive(s, p))
}

pub fn stream(parent: u64, path: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_path(parent, path))
}
