//! The `magattn` command-line harness: oracle equivalence suites, branch scaling
//! benchmarks, toy-model training and schedule dumps.
//!
//! Every command reads a per-command set of keys (see [`config`]) and writes
//! `<command>-<timestamp>.csv` plus a `.manifest` into its output directory.

use std::path::PathBuf;

pub mod bench;
pub mod cli;
pub mod config;
pub mod equiv;
pub mod error;
pub mod output;
pub mod schedule;
pub mod train;

pub use error::{HarnessError, Result};

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Report {
    /// Whether every check of the command passed.
    pub passed: bool,
    pub csv: PathBuf,
    pub manifest: PathBuf,
}
