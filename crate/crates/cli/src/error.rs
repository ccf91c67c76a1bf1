use std::path::Path;

use mvinverse::eval::EvalError;
use mvinverse::geometry::GeometryError;
use mvinverse::io::IoError;
use mvinverse::model::ModelError;
use mvinverse::pipeline::PipelineError;
use mvinverse::relight::RelightError;
use mvinverse::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Relight(#[from] RelightError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CliError {
    pub fn config(path: &str, message: impl ToString) -> Self {
        CliError::Config {
            path: path.to_string(),
            message: message.to_string(),
        }
    }

    pub fn file(path: &Path, source: std::io::Error) -> Self {
        CliError::File {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short category for the structured error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::File { .. } | CliError::Io(_) => "io",
            CliError::Data(_) => "data",
            CliError::Pipeline(PipelineError::Config(_)) => "config",
            CliError::Pipeline(_) => "training",
            CliError::Eval(_) => "eval",
            CliError::Relight(_) => "relight",
            CliError::Geometry(_) => "geometry",
            CliError::Model(_) => "model",
            CliError::Tensor(_) => "tensor",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
