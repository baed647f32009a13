//! Tensor values, the differentiable graph, and gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{check_gradients, compare_with_fd, GradCheckReport, FD_STEP};
pub use graph::{Graph, VarId};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
