//! Seed derivation. Every random draw comes from a ChaCha stream keyed by
//! `(seed, step, role)`, so reordering or parallelising runs never changes
//! what any one run sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    InitialNoise = 1,
    AncestralNoise = 2,
    Dataset = 3,
    Weights = 4,
    Placement = 5,
    Probe = 6,
}

pub fn stream(seed: u64, step: u64, role: Role) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((role as u64) << 32) ^ step);
    rng
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
