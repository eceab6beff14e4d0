//! Multi-modal convolutional sparse coding and its unrolled network.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{adjoint_conv, conv_same, filter_grad, soft_threshold, FilterBank, Precision, Real, Tensor};
pub mod config;
pub mod data;
pub mod io;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod train;
pub mod verify;
