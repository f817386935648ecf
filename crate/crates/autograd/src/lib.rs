//! Reverse-mode automatic differentiation over dense rank-4 tensors.
//!
//! A [`Graph`] records every operation of one forward pass; a single
//! [`Graph::backward`] call then returns gradients for all recorded nodes.
//! Everything is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference verification.

mod conv;
mod error;
mod graph;
pub mod numeric;
mod real;
mod tensor;

pub use conv::ConvSpec;
pub use error::{GraphError, Result};
pub use graph::{avg_pool2, broadcast_map, gram, sigmoid, Gradients, Graph, Unary, Var};
pub use real::{DType, Real};
pub use tensor::{Shape, Tensor};
