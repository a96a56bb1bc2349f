//! Continual learning on a frozen transformer backbone.
//!
//! The crate trains a small vision-transformer-style backbone once, freezes it,
//! and then adapts it to a sequence of tasks without ever touching the frozen
//! weights. Each task gets its own bundle of cheap parameters:
//!
//! - an elementwise real-valued *soft mask* per selected weight matrix
//!   (or, alternatively, LoRA factors, bottleneck adapters, or learned binary
//!   masks over scores),
//! - a per-task prompt and matching key, attached to attention via
//!   prefix-tuning, alongside a shared prompt on earlier layers,
//! - a snapshot of the shared state taken when the task finishes, so earlier
//!   tasks can always be evaluated exactly as they were left.
//!
//! At test time the task identity is either given (oracle), inferred by
//! nearest-key lookup on frozen features, or inferred from the gradient of the
//! prediction entropy with respect to per-task mixture coefficients.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine over
//! dense `f64` tensors; see [`tensor`] and [`tape`].

pub mod adaptation;
pub mod backbone;
pub mod checkpoint;
pub mod cl_engine;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod prompts;
pub(crate) mod seeds;
#[cfg(test)]
pub(crate) mod testutil;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
