//! Configuration-driven front end for the `sdreplica` library: single
//! solves, searches, simulation agreement runs and reproducible grid sweeps.

pub mod config;
pub mod error;
pub mod sweep;
pub mod tasks;

pub use config::{RunConfig, SweepSettings, Task, SCHEMA_VERSION};
pub use error::{CliError, Diagnostic};
pub use sweep::{run_single, run_sweep, Manifest, SweepOutcome, SweepSpec};

use std::path::Path;

/// Parse and check a configuration file for `task` (the `[sweep]` table's
/// task when `None`), returning the fully defaulted TOML.
pub fn validate_config(path: &Path, task: Option<Task>) -> Result<String, CliError> {
    let (cfg, src) = RunConfig::load(path)?;
    match task {
        Some(t) => cfg.validate(t, Some(&src))?,
        None if cfg.sweep.is_some() => {
            cfg.validate_sweep(Some(&src))?;
        }
        None => {}
    }
    cfg.to_toml()
}
