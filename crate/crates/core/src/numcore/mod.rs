//! Dense tensors, reverse-mode differentiation, and the optimizer.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{lr_at_step, AdamConfig, AdamState};
pub use tape::{gelu_scalar, normal_cdf, softmax_values, Gradients, Tape, TapeError, Var};
pub use tensor::{ShapeError, Tensor};
