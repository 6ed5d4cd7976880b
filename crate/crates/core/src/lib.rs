//! Prediction-interval estimation with two-output neural networks.

pub mod autodiff;
pub mod data;
pub mod model;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
