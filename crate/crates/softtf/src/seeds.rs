//! Seed-stream layout.
//!
//! All randomness in the crate flows from one master seed through counter-mode
//! RNG streams, one stream per independent purpose. Class draws use streams
//! `1..=num_classes` (see `data`); everything else lives far above them so the
//! purposes can never collide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Backbone weight initialization during pretraining.
pub(crate) const PRETRAIN_INIT: u64 = 1 << 32;
/// Batch shuffling during pretraining.
pub(crate) const PRETRAIN_SHUFFLE: u64 = (1 << 32) + 1;
/// Continual-learning head initialization.
pub(crate) const HEAD_INIT: u64 = (1 << 32) + 2;
/// Shared-prompt initialization.
pub(crate) const G_PROMPT_INIT: u64 = (1 << 32) + 3;
/// Per-task parameter initialization.
pub(crate) fn task_init(task: usize) -> u64 {
    (1 << 33) + task as u64
}
/// Per-task batch shuffling.
pub(crate) fn task_shuffle(task: usize) -> u64 {
    (1 << 34) + task as u64
}
/// Start point of the convergence probe.
pub(crate) const PROBE_INIT: u64 = (1 << 35) + 1;

/// RNG positioned on `stream` of the generator derived from `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
