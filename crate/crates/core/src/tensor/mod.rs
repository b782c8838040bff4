//! Dense tensors and a define-by-run reverse-mode differentiation graph.

mod gradcheck;
mod graph;
pub mod kernels;
mod value;

pub use gradcheck::{grad_check, grad_check_many, relative_error};
#[cfg(test)]
pub(crate) use graph::sigmoid;
pub use graph::{Binary, ColumnStats, CustomBackward, Graph, NormStats, Unary, Var};
pub use value::Tensor;

#[cfg(test)]
mod tests;
