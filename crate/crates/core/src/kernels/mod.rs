//! Forward and backward numeric kernels. These are pure functions over
//! [`Tensor`](crate::tensor::Tensor)s; the [`Tape`](crate::autodiff::Tape)
//! records which of them ran and replays the backward halves.

pub mod conv;
pub mod elementwise;
pub mod norm;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, Kernel};
pub use elementwise::*;
pub use norm::{batch_norm_backward, batch_norm_forward, BnSaved, Mode, RunningStats};
