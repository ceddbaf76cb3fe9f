//! PathCapsNet: a multipath capsule network with fan-in and fan-out
//! dynamic routing and DropCircuit path regularization, on a small
//! reverse-mode differentiation engine.

pub mod autodiff;
pub mod capsules;
pub mod data;
pub mod error;
pub mod model;
pub mod paths;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
