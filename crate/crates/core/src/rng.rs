use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) type Rng = ChaCha8Rng;

/// Independent stream for a given purpose so that adding draws in one stage
/// never shifts another stage's sequence.
pub(crate) fn stream(seed: u64, purpose: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub(crate) const STREAM_SPLIT: u64 = 1;
pub(crate) const STREAM_INIT: u64 = 2;
pub(crate) const STREAM_SAMPLER: u64 = 3;
pub(crate) const STREAM_SYNTH: u64 = 4;
pub(crate) const STREAM_BOOTSTRAP: u64 = 5;
