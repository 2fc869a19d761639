//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
mod kernels;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{
    finite_difference, finite_difference_at, grad_check, grad_check_at, GradCheckReport,
};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
