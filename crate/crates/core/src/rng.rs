//! Named random streams derived from a single master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Generator = 1,
    Masking = 2,
    Init = 3,
    Folds = 4,
}

/// Independent generator for `(seed, stream, index)`; e.g. one masking
/// stream per fold.
pub fn stream_rng(seed: u64, stream: Stream, index: u32) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | u64::from(index));
    rng
}
