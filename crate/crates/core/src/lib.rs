//! FuXi-α sequential recommendation.

pub mod analysis;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use baselines::VariantKind;
pub use config::{ModelConfig, TrainConfig};
pub use error::{FuxiError, Result};
pub use tensor::Tensor;
