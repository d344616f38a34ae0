//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
