//! Command failures and their stable exit codes.

use diffad::checkpoint::CheckpointError;
use diffad::dataio::DataError;
use diffad::detect::DetectError;
use diffad::patchgen::PatchGenError;
use diffad::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    SingleClass(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Checkpoint(_) => 5,
            CliError::SingleClass(_) => 6,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) => CliError::Config(e.to_string()),
            DataError::PatchGen(PatchGenError::InvalidConfig(_)) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<PatchGenError> for CliError {
    fn from(e: PatchGenError) -> Self {
        match e {
            PatchGenError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(format!("checkpoint: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::Resume(_) => CliError::Checkpoint(e.to_string()),
            TrainError::Log(_) => CliError::Io(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::SingleClass { .. } => CliError::SingleClass(e.to_string()),
            DetectError::PointCountMismatch { .. } | DetectError::Checkpoint(_) => {
                CliError::Checkpoint(e.to_string())
            }
            _ => CliError::Io(e.to_string()),
        }
    }
}
