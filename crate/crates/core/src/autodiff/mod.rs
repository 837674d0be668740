//! Dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations on row-major `f64` tensors in insertion
//! order. The primitive set is small: matmul, add, multiply, scale, concat,
//! relu, sigmoid, log, softmax, reduce-mean and smooth-L1, plus the
//! structural ops reshape and row selection and the gradient reversal node.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, LOG_FLOOR};
pub use kernels::smooth_l1;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
