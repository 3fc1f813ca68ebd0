use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use expgrowth::io::{run_command, RunOptions};

#[derive(Parser)]
#[command(
    name = "expgrowth",
    version,
    about = "Rothe time stepping with discrete a priori diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration file.
    Run {
        config: PathBuf,
        /// Output directory for manifest, diagnostics and snapshots.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Step even when tau violates the step-size gate.
        #[arg(long)]
        override_tau_gate: bool,
        /// Report thresholds and exit without stepping.
        #[arg(long)]
        thresholds_only: bool,
        /// Write u and rho snapshots every K steps (0 disables).
        #[arg(long, value_name = "K")]
        snapshot_every: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let Command::Run {
        config,
        out,
        override_tau_gate,
        thresholds_only,
        snapshot_every,
    } = cli.command;
    let code = run_command(&RunOptions {
        config_path: config,
        out_dir: out,
        override_tau_gate,
        thresholds_only,
        snapshot_every,
    });
    ExitCode::from(code as u8)
}
