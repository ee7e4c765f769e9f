//! Experiment runner behind the `mrff` binary: TOML configs, metrics files,
//! sweeps and self-verification.

mod commands;
mod config;
pub mod metrics;
pub mod verify;

pub use commands::{
    cell_seed, cmd_run, cmd_sweep, fnv1a, render_sweep, run_experiment, run_sweep, sweep_table,
    RunOutcome, SweepAxis, SweepCell, SWEEP_SCHEMA,
};
pub use config::{DataConfig, ExperimentConfig, Prepared};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Exit status for an error: bad input is 2, anything that went wrong while
/// running is 1.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::MissingPath(_) | Error::Load { .. } | Error::Checkpoint(_) => {
            EXIT_CONFIG
        }
        _ => EXIT_FAILURE,
    }
}
