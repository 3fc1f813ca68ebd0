//! Configuration, initial data, output files and the `run` command.

pub mod command;
pub mod config;
pub mod ic;
pub mod output;

pub use command::{run_command, RunOptions, EXIT_ABORT, EXIT_CONFIG, EXIT_OK};
pub use config::{parse_config, Config, ConfigError, SnapshotFormat};
pub use ic::{boundary_flux_report, BoundaryFluxReport, InitialCondition};
pub use output::{csv_grid, parse_csv_grid, write_diagnostics_csv, write_snapshot};
