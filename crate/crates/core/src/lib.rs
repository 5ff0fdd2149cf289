//! Multi-platform LiDAR semantic segmentation with a serialized point
//! transformer backbone and condition-specific normalization.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod serialization;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
