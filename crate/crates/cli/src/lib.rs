//! Command implementations behind the `srnmt` binary.

pub mod commands;
pub mod config;

pub use commands::{run, Command};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration or inputs.
    #[error("{0}")]
    Usage(String),
    /// Gradient check failure or training divergence.
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] srnmt::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) | CliError::Core(srnmt::Error::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}
