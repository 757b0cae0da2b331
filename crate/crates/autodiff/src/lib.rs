//! Small reverse-mode automatic differentiation engine over `ndarray`.
//!
//! Values are `f64` tensors. Backward rules are themselves built from
//! differentiable operations, so gradients can be differentiated again.

pub mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;
pub mod params;
pub mod sparse;
mod var;

pub use ops::{as_matrix, broadcast_shapes, reduce_to};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use sparse::SparseMap;
pub use var::{grad, grad_values, grad_with_seed, grad_enabled, no_grad, with_grad_mode, Tensor, Var};
