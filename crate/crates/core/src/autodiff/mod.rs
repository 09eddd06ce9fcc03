//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_many};
pub use graph::{Graph, Var};
pub(crate) use tensor::read_u32;
pub use tensor::Tensor;
