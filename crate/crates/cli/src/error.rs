use std::fmt;
use std::path::Path;

use cunet_core::Error;

/// Failure reported as `error[CODE]: message` on a single stderr line.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        let message: String = message.into();
        Self { code, message: message.replace('\n', " ") }
    }

    pub fn task_mismatch(message: impl Into<String>) -> Self {
        Self::new("E_TASK_MISMATCH", message)
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self::new("E_IO", format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self.code {
            "E_USAGE" => 2,
            "E_CONFIG" => 3,
            "E_IO" => 4,
            "E_PARSE" => 5,
            "E_CHECKPOINT" => 6,
            "E_TASK_MISMATCH" => 7,
            "E_DIVERGED" => 8,
            "E_ORACLE_FAILED" => 9,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Contract(_) => "E_CONTRACT",
            Error::Divergence { .. } | Error::ForwardDivergence { .. } | Error::Training(_) => "E_DIVERGED",
            Error::Parse { .. } => "E_PARSE",
            Error::Checkpoint { .. } => "E_CHECKPOINT",
            Error::Config(_) | Error::Json(_) => "E_CONFIG",
            Error::Io(_) => "E_IO",
        };
        Self::new(code, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("E_INTERNAL", e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::new("E_IO", e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
