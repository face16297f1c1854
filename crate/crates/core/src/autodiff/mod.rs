//! Dense tensors and tape-based reverse-mode differentiation.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use param::{ParamStore, Parameter};
pub use tape::{Gradients, Padding, Tape, Var};
pub use tensor::Tensor;
