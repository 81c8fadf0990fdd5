use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Argument(String),
    /// Results fell outside the reference bands.
    #[error("{0}")]
    Flagged(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: twostage::Error,
    },
    #[error(transparent)]
    Core(#[from] twostage::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    /// 1 for flagged results, 2 for configuration problems, 3 for runtime failures.
    pub fn code(&self) -> u8 {
        match self {
            CliError::Flagged(_) => 1,
            CliError::Config(_) | CliError::Argument(_) => 2,
            CliError::Core(e) | CliError::Stage { source: e, .. } => match e {
                twostage::Error::Config(_) | twostage::Error::Argument(_) => 2,
                _ => 3,
            },
            CliError::Io(_) | CliError::Json(_) => 3,
        }
    }
}

/// Tags a core error with the pipeline stage it came from.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> StageExt<T> for twostage::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
