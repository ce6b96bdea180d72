//! Seeded random streams.
//!
//! Every run derives all randomness from one `u64` seed. Each consumer draws
//! from its own ChaCha stream so that, for example, changing how many batches
//! are drawn never perturbs parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Batching = 3,
    GradCheck = 4,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
