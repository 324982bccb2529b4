use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ray is parallel to the windshield plane")]
    NoIntersection,

    #[error("intersection lies behind the driver (ray parameter {0})")]
    BehindDriver(f64),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("fetch failed for {request} ({message}); retryable")]
    Fetch { request: String, message: String },

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Short machine-readable category, used for JSON error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::NoIntersection => "no_intersection",
            Error::BehindDriver(_) => "behind_driver",
            Error::Degenerate(_) => "degenerate",
            Error::Diverged { .. } => "diverged",
            Error::Fetch { .. } => "fetch",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}
