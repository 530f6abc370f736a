//! A from-scratch GhostHead (YOLOv11n-family) object detector.

pub mod autograd;
pub mod boxes;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Dims, Scalar, Tensor};
