//! Seeded random streams.
//!
//! Every consumer gets its own ChaCha stream derived from the run seed, so
//! adding a draw in one place never perturbs another component's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream identifiers. The low 32 bits of a stream id carry an index
/// (epoch, item number) so one purpose can own many independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Records = 1,
    Render = 2,
    Split = 3,
    Init = 4,
    EpochPlan = 5,
    Captions = 6,
    Negatives = 7,
    Evaluation = 8,
}

/// Generator for `stream` / `index` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | (index & 0xffff_ffff));
    rng
}

/// Plain seeded generator, for callers that manage their own streams.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
