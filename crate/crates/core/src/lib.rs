//! Routed modular networks for task-incremental continual learning, with
//! dense baselines, EWC, and the experiment harness around them.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod information;
pub mod learner;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod routing;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use learner::{Learner, ModelKind};
pub use metrics::{ErrorMatrix, PathEntropyReport, ResultRow};
pub use model::{DibConfig, DibModel, RoutingMode};
pub use tensor::Tensor2D;
pub use trainer::{Architecture, RunCondition, TrainSettings};
