//! Minimal dense-tensor kernel with reverse-mode differentiation.
//!
//! All values are `f64`. Every kernel records a node in a [`Graph`]; calling
//! [`Graph::backward`] on a scalar node yields one gradient per parameter of
//! a [`ParamStore`].

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{central_differences, grad_check, max_relative_error};
pub use graph::{Graph, NodeId};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
