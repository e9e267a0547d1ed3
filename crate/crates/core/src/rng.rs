//! Named random substreams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! a single seed, so changing how much one stage consumes never shifts
//! another stage's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Permutation = 1,
    TrainPairs = 2,
    TestPairs = 3,
    Init = 4,
    Shuffle = 5,
    Dropout = 6,
    GradCheck = 7,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Stream for a numbered sub-unit (an epoch, a step) of a named stream.
pub fn indexed_substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    substream(mixed, stream)
}
