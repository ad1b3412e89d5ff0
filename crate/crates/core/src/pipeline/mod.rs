//! Three-stage progressive training with cross-task distillation.

mod config;
mod dataset;
mod train;

pub use config::{ConfigError, TrainConfig};
pub use dataset::{Batch, PreparedSet};
pub use train::{
    changed_parameters, closest_candidates, teacher_features, EpochRecord, PipelineVariant,
    StageOutputs, Trainer,
};

use crate::backbone::{BackboneError, CheckpointError, Stage};
use crate::objectives::LossError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("window {index} has {found} positions, expected {expected}")]
    WindowLength {
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("expected a stage {expected} checkpoint, got stage {found}")]
    WrongStage { expected: Stage, found: Stage },
    #[error("encoder configuration of {what} does not match the training configuration")]
    ConfigMismatch { what: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(Box<crate::eval::EvalError>),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;
