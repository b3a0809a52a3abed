use std::path::PathBuf;

use rdcd_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("missing artifact: {0} (run the producing command first)")]
    Missing(PathBuf),
    #[error("{0} is not empty; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::Io(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Numeric(_) => 5,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::InvalidSizes(_) | CoreError::NonPositiveTemperature(_) => 2,
                CoreError::Io(_) | CoreError::Format(_) => 3,
                _ => 5,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
