//! Two-stage training, optimizer and checkpoint persistence.

mod adam;
mod checkpoint;
mod config;
mod train;

use crate::geometry::GeometryError;
use crate::io::IoError;
use crate::model::ModelError;
use crate::tensor::TensorError;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::Checkpoint;
pub use config::{LrSchedule, Stage, TrainConfig};
pub use train::{
    predict_scene, sample_pretrain_batch, sample_triple, train_finetune, train_pretrain, StepRecord,
    TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite gradient for parameter {param} at index {index}: {value}")]
    NonFiniteGradient { param: String, index: usize, value: f64 },
    #[error("scene {scene}: no flow for frame pair ({from}, {to})")]
    MissingFlow { scene: String, from: usize, to: usize },
    #[error("archive holds no scenes")]
    EmptyArchive,
    #[error("run log: {0}")]
    Log(std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
