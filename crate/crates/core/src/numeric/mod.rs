//! Dense matrices, reverse-mode differentiation and the seeded RNG that the
//! rest of the crate is built on.

pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod params;
pub mod rng;

pub use gradcheck::{grad_check, grad_check_with};
pub use graph::{Gradients, Graph, NodeId};
pub use matrix::{matmul, sigmoid, sigmoid_scalar, softmax_rows, Matrix2D, TokenSeq};
pub use params::{BoundParams, ParamId, ParamTape};
pub use rng::RngState;
