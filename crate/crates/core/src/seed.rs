//! One user seed fans out into independent per-stage streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pipeline stages that consume randomness. The discriminant is the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Synth = 1,
    Sample = 2,
    Whitening = 3,
    Init = 4,
    Train = 5,
    Eval = 6,
}

/// Generator for `stage` under the run seed. Streams never overlap.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// Derived 64-bit seed for APIs that take a plain seed.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    use rand::RngCore;
    stage_rng(seed, stage).next_u64()
}
