//! Seeded random streams.
//!
//! Every stochastic component of a run draws from its own stream, derived
//! from the run seed and a fixed stream tag. Adding or removing draws in one
//! component never shifts the values another component sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named random streams used by a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Shuffle = 1,
    AuxSampling = 2,
    Init = 3,
    Augment = 4,
    Data = 5,
    Split = 6,
    Bootstrap = 7,
    Eval = 8,
}

/// Returns the generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Generator for a sub-stream, e.g. one subset of a generated dataset.
pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}
