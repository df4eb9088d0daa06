//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::pearson_stats;
