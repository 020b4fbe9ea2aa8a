use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    /// Malformed file contents.
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] arcplan_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), message: e.to_string() }
    }

    /// Prefixes format errors with the offending file.
    pub fn context(self, path: &Path) -> Self {
        match self {
            CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Format(_) => "format",
            CliError::Config(_) => "config",
            CliError::Core(arcplan_core::Error::Config(_)) => "config",
            CliError::Core(_) => "invariant",
        }
    }

    /// The single diagnostic line printed on failure.
    pub fn line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            message: String,
        }
        serde_json::to_string(&Line { error: self.kind(), message: self.to_string() }).expect("serializable")
    }
}
