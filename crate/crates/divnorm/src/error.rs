use std::io;
use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{source_name}:{line}: {message}")]
    Parse { source_name: String, line: u64, message: String },
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] divnorm_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn parse(source_name: impl Into<String>, line: u64, message: impl Into<String>) -> Self {
        CliError::Parse { source_name: source_name.into(), line, message: message.into() }
    }

    /// 1 for problems with the user's input, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Parse { .. } | CliError::Read { .. } => 1,
            CliError::Core(divnorm_core::Error::Config(_)) => 1,
            CliError::Write { .. } | CliError::Core(_) | CliError::Failed(_) => 2,
        }
    }
}
