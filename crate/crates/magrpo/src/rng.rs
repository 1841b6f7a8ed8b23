//! Deterministic named RNG substreams.
//!
//! Every stochastic site in a run draws from a ChaCha stream addressed by
//! `(seed, purpose, iteration, task, draw)`. Streams are independent by
//! construction, so rollouts may be collected on any number of threads in any
//! order and still reproduce bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a substream is for. Keeps separately purposed streams disjoint even
/// when their numeric coordinates coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Task generation (hidden targets, feature seeds).
    Task = 1,
    /// One rollout of one task.
    Rollout = 2,
    /// Monte-Carlo draws inside the inflation probe.
    Probe = 3,
    /// Batch generation in the verification suite.
    Verify = 4,
}

const ITER_BITS: u32 = 20;
const TASK_BITS: u32 = 20;
const DRAW_BITS: u32 = 16;

/// Derives the substream for `(purpose, iteration, task, draw)` under `seed`.
///
/// Coordinates are packed into the ChaCha stream id; each must fit its field.
pub fn substream(seed: u64, purpose: Purpose, iteration: u64, task: u64, draw: u64) -> ChaCha8Rng {
    assert!(iteration < 1 << ITER_BITS, "iteration index out of range");
    assert!(task < 1 << TASK_BITS, "task index out of range");
    assert!(draw < 1 << DRAW_BITS, "draw index out of range");
    let stream = ((purpose as u64) << (ITER_BITS + TASK_BITS + DRAW_BITS))
        | (iteration << (TASK_BITS + DRAW_BITS))
        | (task << DRAW_BITS)
        | draw;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
