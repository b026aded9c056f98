//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by a seed and a
//! purpose tag, so draws in one place never shift draws in another and jobs can
//! run in any order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags for independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    MemberSeed = 1,
    Subset = 2,
    Perturb = 3,
    Train = 4,
    Init = 5,
    Shuffle = 6,
    LdsSubsets = 7,
    Retrain = 8,
    Removal = 9,
    Synthetic = 10,
    Null = 11,
    MonteCarlo = 12,
}

/// A ChaCha stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

/// Derives a child seed for job `index` under `purpose`.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    stream(seed, purpose, index).next_u64()
}

/// Seed of ensemble member `k` (1-based) under a master seed.
pub fn member_seed(master_seed: u64, k: usize) -> u64 {
    derive_seed(master_seed, Purpose::MemberSeed, k as u64)
}

/// `⌈fraction · n⌉`, treating products within 1e-9 of an integer as exact
/// (so `⌈0.3 · 10⌉ = 3`), and never less than 1.
pub fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let nearest = raw.round();
    let size = if (raw - nearest).abs() <= 1e-9 * raw.abs().max(1.0) { nearest } else { raw.ceil() };
    (size as usize).clamp(1, n.max(1))
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
