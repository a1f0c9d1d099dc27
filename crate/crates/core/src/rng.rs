//! Seeded, splittable random streams. Every stochastic operation takes its
//! generator explicitly so runs are reproducible from a single seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child stream, advancing the parent by one draw.
pub fn split(parent: &mut Rng) -> Rng {
    ChaCha8Rng::seed_from_u64(parent.next_u64())
}
