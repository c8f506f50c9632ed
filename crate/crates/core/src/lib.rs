//! Multimodal transformer lab: missing-modality robustness via multi-task
//! attention masking and a searchable fusion layer, on a small define-by-run
//! autodiff core.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod policy;
pub mod runner;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
