//! Progressive split state-space image restoration.
//!
//! Feature maps are split into geometry-aligned patches, each patch is
//! rasterised and run through a stable diagonal linear recurrence, and the
//! results are fused with a convolutional path inside a multi-scale hierarchy.

pub mod block;
pub mod checkpoint;
pub mod counter;
pub mod data;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod hierarchy;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod partition;
pub mod real;
pub mod ssm;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use hierarchy::{Model, ModelConfig};
pub use params::ParamStore;
pub use partition::SplitLevel;
pub use real::Real;
pub use task::{LossKind, RestoreTask, TaskKind};
pub use tensor::{FeatureMap, Shape};
pub use train::{TrainConfig, Trainer};
