//! Dense tensors, reverse-mode differentiation, AdamW, and gradient checking.

mod gradcheck;
mod ops;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use ops::{gelu, nll_loss, softmax, Axis};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use params::{accumulate_grads, Bound, ParamSet};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::Tensor;
