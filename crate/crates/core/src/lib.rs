//! Label-shift adaptation for multi-label image classifiers.
//!
//! A base network is trained on a source region, then its classifier head
//! is re-fitted per tuning fold on a mixture of source and target samples.
//! Fold models are averaged and groups of models are blended with weights
//! searched under a stage-1 tolerance.

pub mod adapt;
pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod optimize;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use labels::LabelSet;
pub use rng::Rng;
pub use tensor::{ImageTensor, Matrix};
