//! Tensors, parameters and a reverse-mode differentiation tape.

mod graph;
pub mod gradcheck;
mod kernels;
mod param;
mod real;
mod tensor;

pub use graph::{Graph, Var};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
