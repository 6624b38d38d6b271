//! Library side of the `mesenchymal` command-line tool.

pub mod commands;
pub mod config;
pub mod output;
pub mod specfile;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, bad spec file or bad usage.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// The solver hit a NaN, a negative value or a singular kernel.
    #[error("numerical abort: {0}")]
    Numerical(String),
    /// A steady-state check ran to completion and found the input inadmissible.
    #[error("inadmissible: {0}")]
    Inadmissible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Numerical(_) => 2,
            CliError::Inadmissible(_) => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}
