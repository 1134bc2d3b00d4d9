//! Seeded random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 generator keyed by
//! `(seed, purpose)`, so two consumers of the same seed never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for. The discriminant selects the ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Balance = 1,
    Split = 2,
    Permutation = 3,
    Synthesis = 4,
}

pub fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
