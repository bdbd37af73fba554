//! Bidirectional selective state-space models for multi-view classification,
//! with a quadratic-attention baseline, evaluation metrics, synthetic data,
//! a training loop and scaling benchmarks.

pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
