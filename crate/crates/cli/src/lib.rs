//! Command implementations behind the `pairfolio` binary.
//!
//! Every command reads one [`Config`], writes its artifacts plus a
//! `manifest.json` into its output directory and reports failures as
//! [`CliError`], whose [`exit_code`](CliError::exit_code) is 2 for
//! configuration problems and 3 for data or runtime failures.

pub mod commands;
pub mod config;
pub mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};

pub use commands::{cmd_backtest, cmd_fetch, cmd_grid, cmd_report, cmd_train, Ctx};
pub use config::{Config, DataSource, DATA_DIR_ENV};
pub use manifest::RunManifest;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or flags.
    Config(String),
    /// Data, training or backtest failure.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Size rayon's global pool. Only the first call in a process has an effect.
pub fn init_pool(workers: Option<usize>) {
    if let Some(n) = workers {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            log::debug!("worker pool already initialised");
        }
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
