//! Reverse-mode differentiation substrate: a small f64 tensor with taped
//! primitives, the Adam optimizer, the warmup-cosine schedule, and binary
//! parameter checkpoints. Sized for desk-scale models; no BLAS, no GPU.

mod adam;
mod checkpoint;
mod schedule;
mod tensor;

pub use adam::{Adam, ParameterSet};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use schedule::cosine_warmup_lr;
pub use tensor::{no_grad, Tensor};
