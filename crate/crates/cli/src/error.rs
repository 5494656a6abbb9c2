use std::path::Path;

use switchdetect::Error;

/// Process exit status for each failure class.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O failure: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    /// Core error raised while reading `path`; parse and I/O problems name it.
    pub fn from_core_io(err: Error, path: &Path) -> Self {
        match err {
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => CliError::io(path, err),
            other => other.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let msg = err.to_string();
        match err {
            Error::Config(_)
            | Error::Capacity { .. }
            | Error::UnknownModule(_)
            | Error::UnknownParameter { .. }
            | Error::Schema(_)
            | Error::MissingColumns(_) => CliError::Config(msg),
            Error::Divergence { .. }
            | Error::RankDeficient(_)
            | Error::PerfectLeverage { .. }
            | Error::Numeric(_)
            | Error::TrainingDiverged { .. } => CliError::Numeric(msg),
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => CliError::Io(msg),
        }
    }
}
