//! Failure classes and their exit codes.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad input or a 4xx answer.
    Validation,
    /// The server could not be reached.
    Connectivity,
    /// A 5xx answer or a failed job.
    Server,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Validation => 1,
            ExitKind::Connectivity => 2,
            ExitKind::Server => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ExitKind,
    /// Service error code when the server sent one.
    pub code: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError { kind: ExitKind::Validation, code: None, message: msg.into() }
    }

    pub fn connectivity(msg: impl Into<String>) -> Self {
        CliError { kind: ExitKind::Connectivity, code: None, message: msg.into() }
    }

    pub fn server(msg: impl Into<String>) -> Self {
        CliError { kind: ExitKind::Server, code: None, message: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.code {
            Some(c) => write!(f, "{c}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for CliError {}

impl From<trinity_core::Error> for CliError {
    fn from(e: trinity_core::Error) -> Self {
        let kind = match e.code() {
            "internal" => ExitKind::Server,
            _ => ExitKind::Validation,
        };
        CliError { kind, code: Some(e.code().into()), message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::validation(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
