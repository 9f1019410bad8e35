use nap_core::Error as CoreError;

/// Failure of a CLI command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Core(CoreError),
    #[error("{failed} sweep cell(s) failed")]
    SweepCells { failed: usize, first_code: i32 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Generation(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Checkpoint(_) => 5,
            CliError::Io { .. } | CliError::Core(_) => 1,
            CliError::SweepCells { first_code, .. } => *first_code,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::GenerationFailure { .. } => CliError::Generation(e.to_string()),
            CoreError::TrainingDiverged(_) => CliError::Diverged(e.to_string()),
            CoreError::InvalidArgument(_) => CliError::Config(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
