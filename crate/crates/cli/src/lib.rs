//! Library side of the `emix` command-line tool.
//!
//! Every command takes a parsed [`RunConfig`] plus optional overrides and
//! writes its artifacts below `<out_dir>/<run_id>/`.

pub mod commands;
pub mod grid;

use emix_core::Error;

pub use commands::{cmd_export_embeddings, cmd_stats_report, cmd_sweep, cmd_train, SweepSummary};
pub use grid::{parse_grid, Axis, Grid};

/// Process exit status for a command outcome.
pub fn exit_code(result: &Result<(), Error>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_numerical() => 2,
        Err(_) => 1,
    }
}
