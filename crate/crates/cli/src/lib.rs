//! Command implementations behind the `dacl` binary.
//!
//! Each command is a plain function so tests and benches can drive it
//! in-process; `main.rs` only parses flags and maps errors to exit codes.

pub mod args;
pub mod commands;
pub mod embeddings_csv;
pub mod selftest;

use std::fmt;

use dacl::DaclError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_SELFTEST: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Selftest { failed: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Selftest { .. } => EXIT_SELFTEST,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Selftest { failed } => write!(f, "selftest: {failed} check(s) failed"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DaclError> for CliError {
    fn from(e: DaclError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
