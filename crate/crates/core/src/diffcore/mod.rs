//! Tensors, reverse-mode differentiation, a finite-difference oracle and
//! first-order optimizers.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use optim::{AdamParams, Optimizer, OptimizerKind};
pub use params::ParamSet;
pub use tape::{sign, value_and_grad, Gradients, Tape, Var, NORM_FLOOR};
pub use tensor::Tensor;
