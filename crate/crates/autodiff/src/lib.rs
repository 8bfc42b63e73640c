//! Minimal dense tensors with tape-based reverse-mode automatic differentiation.

mod error;
mod float;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{lit, DType, Float};
pub use graph::{Graph, OpKind, Var, KL_Q_FLOOR, PROB_ROW_TOL};
pub use tensor::{argmax, top_k_indices, Tensor};
