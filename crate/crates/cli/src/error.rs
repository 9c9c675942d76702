use thiserror::Error;

use rkf_core::Error as CoreError;

/// Failure classes; each maps to its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Data(_) => 5,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(_) => CliError::Io(e.to_string()),
            CoreError::CheckpointMagic(_)
            | CoreError::CheckpointVersion(_)
            | CoreError::CheckpointCrc { .. }
            | CoreError::CheckpointFormat(_) => CliError::Checkpoint(e.to_string()),
            CoreError::ImageFormat(_) | CoreError::Manifest(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
