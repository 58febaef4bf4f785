use std::io;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unknown columns, malformed inputs; exit status 2.
    #[error("{0}")]
    Usage(String),

    /// Failures inside estimation or prediction; exit status 1.
    #[error(transparent)]
    Numerical(#[from] crossre_core::Error),

    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) | CliError::Io { .. } => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
