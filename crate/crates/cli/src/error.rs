use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const ASSERTION: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] ctrnn_lab::Error),

    #[error("{} check(s) failed:\n  {}", .0.len(), .0.join("\n  "))]
    Assertion(Vec<String>),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        use ctrnn_lab::Error as E;
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Assertion(_) => exit::ASSERTION,
            CliError::Core(e) => match e {
                E::Contract(_) | E::Dimension { .. } => exit::USAGE,
                E::NonFinite { .. } | E::Diverged { .. } => exit::ASSERTION,
                E::Io { .. } | E::Format { .. } | E::Json(_) | E::CacheConflict { .. } | E::EncodingOverflow { .. } => {
                    exit::IO
                }
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
