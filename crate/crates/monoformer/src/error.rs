use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] monoformer_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot decode image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{failed} of {total} files failed to shift; see {manifest}")]
    ShiftFailed { failed: usize, total: usize, manifest: PathBuf },
    #[error("training stopped at step {step}: {reason}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    Diverged { step: usize, reason: String, last_checkpoint: Option<PathBuf> },
}

impl AppError {
    /// Short machine-readable category for the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Core(monoformer_core::Error::ParamMismatch(_)) => "param_mismatch",
            AppError::Core(_) => "core",
            AppError::Io { .. } => "io",
            AppError::Image { .. } => "image",
            AppError::Format { .. } => "format",
            AppError::Config(_) => "config",
            AppError::Dataset(_) => "dataset",
            AppError::ShiftFailed { .. } => "shift_failed",
            AppError::Diverged { .. } => "diverged",
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
