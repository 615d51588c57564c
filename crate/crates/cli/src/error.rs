use fcam_core::FcamError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] FcamError),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("plot error: {0}")]
    Plot(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Machine-readable failure written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(FcamError::Config(_)) | CliError::Usage(_) => "config",
            CliError::Core(FcamError::CheckpointNotFound(_)) => "missing_checkpoint",
            CliError::Core(FcamError::DatasetNotFound(_)) => "dataset_not_found",
            CliError::Core(FcamError::Record { .. }) => "record",
            CliError::Core(FcamError::Io { .. }) => "io",
            CliError::Plot(_) => "plot",
            CliError::Core(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "missing_checkpoint" => 3,
            "dataset_not_found" => 4,
            _ => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        }
    }
}
