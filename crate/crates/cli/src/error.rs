use std::path::Path;

use salfuse_core::eval::EvalError;
use salfuse_core::forest::ForestError;
use salfuse_core::fusion::FusionError;
use salfuse_core::imaging::ImagingError;
use salfuse_core::tddl::TddlError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration or arguments.
    #[error("configuration error: {0}")]
    Config(String),
    /// Unreadable, unwritable, missing or malformed inputs and outputs.
    #[error("I/O error: {0}")]
    Io(String),
    /// A numerical abort during training or inference.
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<ImagingError> for CliError {
    fn from(e: ImagingError) -> Self {
        match e {
            ImagingError::Sigma(_) | ImagingError::Levels(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ForestError> for CliError {
    fn from(e: ForestError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TddlError> for CliError {
    fn from(e: TddlError) -> Self {
        match e {
            TddlError::Jsc(_) | TddlError::Solve { .. } | TddlError::NonFinite { .. } | TddlError::EmptyActiveSet => {
                CliError::Numerical(e.to_string())
            }
            TddlError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Jsc(_) => CliError::Numerical(e.to_string()),
            FusionError::Grid(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}
