//! Subcommands of the `neurotouch` binary.

pub mod commands;
pub mod config;

use std::fmt;

pub use commands::{cmd_gen, cmd_preprocess, cmd_report, cmd_run, read_report_dir, RunSummary};
pub use config::{ConditionSel, PipelineSel, RunConfig};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Config(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<neurotouch::Error> for CliError {
    fn from(e: neurotouch::Error) -> Self {
        use neurotouch::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::FilterSpec(_) => CliError::Config(msg),
            E::Io { .. } | E::Format(_) | E::ClassCode(_) => CliError::Io(msg),
            _ => CliError::Numerical(msg),
        }
    }
}
