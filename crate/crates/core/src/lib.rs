//! Sparse state-aware adaptation of frozen selective state-space models on
//! point clouds.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dscd;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod model;
pub mod params;
pub mod saa;
pub mod serialization;
pub mod ssm;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{MantisError, Result};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Mat;
