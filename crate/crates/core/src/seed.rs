//! Seeding. Every stochastic routine takes a `u64` seed and owns a ChaCha8
//! generator built from it. Child seeds (one per chain or trial) come from a
//! counter-based split, so the seed of child `i` depends only on the master
//! seed and `i`; adding more chains never changes the earlier ones.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SfRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SfRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed for the `index`-th child of `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index.wrapping_add(1));
    rng.next_u64()
}
