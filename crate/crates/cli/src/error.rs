//! Error classes and their process exit codes.

use std::process::ExitCode;

/// A failure classified by what the user has to fix.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0:#}")]
    Config(anyhow::Error),
    #[error("data error: {0:#}")]
    Data(anyhow::Error),
    #[error("runtime error: {0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn to_exit_code(&self) -> ExitCode {
        ExitCode::from(self.exit_code())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags any error with a [`CliError`] class.
pub trait Classify<T> {
    fn config(self) -> CliResult<T>;
    fn data(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> CliResult<T> {
        self.map_err(|e| CliError::Config(e.into()))
    }

    fn data(self) -> CliResult<T> {
        self.map_err(|e| CliError::Data(e.into()))
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

/// Classifies a core error: bad settings are config errors, unreadable
/// records and files are data errors, everything else is a runtime error.
pub fn from_core(e: rethink_core::Error) -> CliError {
    use rethink_core::Error as E;
    match e {
        E::InvalidTaskSpec(_) | E::InvalidConfig(_) | E::UnknownMetric(_) => CliError::Config(e.into()),
        E::Record { .. } | E::Io { .. } => CliError::Data(e.into()),
        _ => CliError::Runtime(e.into()),
    }
}
