//! Reverse-mode automatic differentiation over dense `f64` matrices.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;
