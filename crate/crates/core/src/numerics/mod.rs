//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything is contiguous and row-major; there are no strided views. The
//! only implicit broadcast is the last-axis bias add ([`Graph::add_bias`]).

mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, ParamId, ParamStore, Var};
pub use kernels::{layer_norm, matmul, softmax_masked, NEG_MASK};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
