//! Experiment harness for the variance-reduced fixed-point solvers:
//! configuration loading, deterministic parallel sweeps, instance audits,
//! and instance-dependent bound estimation, with stable CSV/JSON outputs.

use std::fmt;
use std::path::PathBuf;

pub mod commands;
pub mod config;
pub mod context;
pub mod runner;

/// Errors mapped onto process exit codes: config problems exit 2, audit
/// violations exit 3, runtime failures exit 4.
#[derive(Debug, Clone)]
pub enum CliError {
    Config(String),
    AuditViolation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::AuditViolation(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::AuditViolation(msg) => write!(f, "audit violation: {msg}"),
            CliError::Runtime(msg) => write!(f, "runtime failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct CmdOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub seed_offset: u64,
    pub dry_run: bool,
}

impl CmdOptions {
    pub fn new(config: PathBuf) -> Self {
        Self { config, out: None, workers: 1, seed_offset: 0, dry_run: false }
    }
}
