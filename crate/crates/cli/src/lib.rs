//! Library side of the `cornet` command: run configuration, checkpoints, the
//! training loop and the four subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod train;

/// Failure of a subcommand, split by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Malformed input or arguments; exit status 2.
    #[error("{0}")]
    Usage(String),
    /// Anything that went wrong while running; exit status 1.
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}
