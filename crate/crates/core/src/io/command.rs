//! `run` orchestration: config, gates, stepping, outputs, exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::estimates::{global_bounds_report, small_data_gate, ThresholdReport};
use crate::grid::Field;
use crate::io::config::{parse_config_unchecked, Config, ConfigError, SnapshotFormat};
use crate::io::ic::{boundary_flux_report, BoundaryFluxReport};
use crate::io::output::{fmt_num, write_atomic, write_diagnostics_csv, write_snapshot};
use crate::rothe::{check_tau_constraint, run, RunError, Termination, Trajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_ABORT: i32 = 2;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub override_tau_gate: bool,
    pub thresholds_only: bool,
    pub snapshot_every: Option<usize>,
}

/// Reads and validates the config, with command-line overrides applied first.
pub fn load_config(opts: &RunOptions) -> Result<Config, String> {
    let text = fs::read_to_string(&opts.config_path)
        .map_err(|e| format!("cannot read {}: {e}", opts.config_path.display()))?;
    let mut cfg = parse_config_unchecked(&text).map_err(|e| e.to_string())?;
    if opts.override_tau_gate {
        cfg.override_tau_gate = true;
    }
    if opts.thresholds_only {
        cfg.steps = None;
    }
    if let Some(k) = opts.snapshot_every {
        cfg.snapshot_every = k;
    }
    cfg.validate().map_err(|e: ConfigError| e.to_string())?;
    Ok(cfg)
}

/// Everything the manifest reports; no wall-clock values.
pub struct ManifestInput<'a> {
    pub config: &'a Config,
    pub u0: &'a Field,
    pub thresholds: Result<ThresholdReport, String>,
    pub flux: &'a BoundaryFluxReport,
    pub outcome: Option<&'a Result<Trajectory, RunError>>,
    pub snapshots: &'a [String],
}

fn kv(s: &mut String, k: &str, v: impl std::fmt::Display) {
    let _ = writeln!(s, "{k} = {v}");
}

pub fn manifest_text(m: &ManifestInput) -> String {
    let mut s = String::new();
    let cfg = m.config;
    let grid = m.u0.grid();
    let join = |v: &[f64]| v.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(" ");

    s.push_str("[manifest]\n");
    kv(
        &mut s,
        "code_version",
        concat!("expgrowth-core ", env!("CARGO_PKG_VERSION")),
    );
    kv(
        &mut s,
        "mode",
        if cfg.thresholds_only() {
            "thresholds-only"
        } else {
            "run"
        },
    );

    s.push_str("\n[config]\n");
    s.push_str(&cfg.serialize());

    s.push_str("\n[grid]\n");
    kv(&mut s, "dim", grid.dim());
    kv(
        &mut s,
        "nodes",
        grid.nodes()
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    kv(&mut s, "extent", join(grid.extents()));
    kv(&mut s, "spacing", join(grid.spacing()));
    kv(&mut s, "node_count", grid.node_count());
    kv(&mut s, "volume", fmt_num(grid.volume()));

    s.push_str("\n[time]\n");
    kv(&mut s, "T", fmt_num(cfg.t_final));
    if let (Some(j), Some(tau)) = (cfg.steps, cfg.tau()) {
        kv(&mut s, "j", j);
        kv(&mut s, "tau", fmt_num(tau));
        let r = check_tau_constraint(m.u0, cfg.t_final, j);
        s.push_str("\n[tau_gate]\n");
        kv(&mut s, "surrogate_norm", fmt_num(r.surrogate_norm));
        kv(&mut s, "inverse_norm", fmt_num(r.inverse_norm));
        kv(&mut s, "inverse_eight_t", fmt_num(r.inverse_eight_t));
        kv(&mut s, "bound", fmt_num(r.bound));
        kv(&mut s, "pass", r.pass);
        kv(&mut s, "overridden", cfg.override_tau_gate && !r.pass);
    }

    s.push_str("\n[thresholds]\n");
    match &m.thresholds {
        Ok(t) => {
            kv(&mut s, "c", fmt_num(t.c));
            kv(&mut s, "L0", fmt_num(t.l0));
            kv(&mut s, "h_at_L0", fmt_num(t.h_at_l0));
            kv(&mut s, "s0", fmt_num(t.s0));
            kv(&mut s, "s1", fmt_num(t.s1));
            kv(&mut s, "epsilon0_measured", fmt_num(t.epsilon0_measured));
            kv(&mut s, "exp_bound_measured", fmt_num(t.exp_bound_measured));
            kv(&mut s, "exp_bound_shifted", fmt_num(t.exp_bound_shifted));
            kv(&mut s, "gate_pass", t.gate_pass);
        }
        Err(e) => kv(&mut s, "error", e),
    }

    s.push_str("\n[boundary_flux]\n");
    kv(&mut s, "u0_defect", fmt_num(m.flux.u0_defect));
    kv(&mut s, "density_defect", fmt_num(m.flux.density_defect));
    kv(&mut s, "warning", m.flux.warn);

    if let Some(outcome) = m.outcome {
        s.push_str("\n[run]\n");
        match outcome {
            Ok(traj) => {
                match &traj.termination {
                    Termination::Completed => kv(&mut s, "termination", "completed"),
                    Termination::Aborted { step, error } => {
                        kv(&mut s, "termination", "aborted");
                        kv(&mut s, "failed_step", step);
                        kv(&mut s, "error", error);
                    }
                }
                kv(&mut s, "steps_completed", traj.steps.len());
                let d = &traj.diagnostics;
                kv(&mut s, "diagnostics_rows", d.len());
                kv(&mut s, "diagnostics_table", "diagnostics.csv");
                kv(
                    &mut s,
                    "fp_iters_total",
                    d.iter().map(|r| r.fp_iters).sum::<usize>(),
                );
                kv(
                    &mut s,
                    "fp_iters_max",
                    d.iter().map(|r| r.fp_iters).max().unwrap_or(0),
                );
                kv(
                    &mut s,
                    "newton_iters_total",
                    d.iter().map(|r| r.newton_iters).sum::<usize>(),
                );

                s.push_str("\n[verdicts]\n");
                let slack = traj.config.slack(grid.node_count());
                kv(&mut s, "slack", fmt_num(slack));
                kv(
                    &mut s,
                    "l31_pass",
                    format!("{}/{}", d.iter().filter(|r| r.l31.pass).count(), d.len()),
                );
                kv(
                    &mut s,
                    "l34_pass",
                    format!("{}/{}", d.iter().filter(|r| r.l34.pass).count(), d.len()),
                );
                let fold = |f: fn(&crate::estimates::DiagnosticsRecord) -> f64| {
                    d.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
                };
                kv(&mut s, "max_l31_lhs", fmt_num(fold(|r| r.l31.total)));
                kv(&mut s, "max_l34_lhs", fmt_num(fold(|r| r.l34.total)));
                kv(
                    &mut s,
                    "max_abs_mean_identity_residual",
                    fmt_num(fold(|r| r.mean_identity_residual.abs())),
                );
                kv(&mut s, "min_rg_gap", fmt_num(-fold(|r| -r.rg_gap)));
                let monotone = d.windows(2).all(|w| w[1].e <= w[0].e + slack);
                kv(&mut s, "lyapunov_nonincreasing", monotone);
                if let Some(last) = d.last() {
                    kv(&mut s, "final_E", fmt_num(last.e));
                }

                s.push_str("\n[bounds]\n");
                match global_bounds_report(traj) {
                    Ok(b) => {
                        kv(
                            &mut s,
                            "sup_mass_plus_abs_log",
                            fmt_num(b.sup_mass_plus_abs_log),
                        );
                        kv(&mut s, "sup_abs_mean_u", fmt_num(b.sup_abs_mean_u));
                        kv(&mut s, "sup_w22_u", fmt_num(b.sup_w22_u));
                        kv(&mut s, "sup_w22_rho", fmt_num(b.sup_w22_rho));
                        kv(&mut s, "sup_w", fmt_num(b.sup_w));
                        kv(&mut s, "sup_rho", fmt_num(b.sup_rho));
                        kv(&mut s, "total_dissipation", fmt_num(b.total_dissipation));
                        kv(&mut s, "slices", b.slices);
                    }
                    Err(e) => kv(&mut s, "error", e),
                }
            }
            Err(e) => {
                kv(&mut s, "termination", "aborted");
                kv(&mut s, "failed_step", 0);
                kv(&mut s, "error", e);
                kv(&mut s, "steps_completed", 0);
            }
        }
    }

    if !m.snapshots.is_empty() {
        s.push_str("\n[snapshots]\n");
        kv(
            &mut s,
            "format",
            match cfg.snapshot_format {
                SnapshotFormat::CsvGrid => "csv_grid",
                SnapshotFormat::PlotScript => "plot_script",
            },
        );
        kv(&mut s, "files", m.snapshots.join(" "));
    }
    s
}

fn write_snapshots(traj: &Trajectory, cfg: &Config, out: &Path) -> std::io::Result<Vec<String>> {
    let every = cfg.snapshot_every;
    let mut names = Vec::new();
    if every == 0 {
        return Ok(names);
    }
    let dir = out.join("snapshots");
    fs::create_dir_all(&dir)?;
    let ext = match cfg.snapshot_format {
        SnapshotFormat::CsvGrid => "csv",
        SnapshotFormat::PlotScript => "gp",
    };
    let last = traj.last().k;
    for s in traj.slices() {
        if s.k % every != 0 && s.k != last {
            continue;
        }
        for (tag, f) in [("u", &s.u), ("rho", &s.rho)] {
            let name = format!("{tag}_{:06}.{ext}", s.k);
            write_snapshot(f, &dir.join(&name), cfg.snapshot_format)?;
            names.push(format!("snapshots/{name}"));
        }
    }
    Ok(names)
}

/// Runs one configuration and returns the process exit code.
pub fn run_command(opts: &RunOptions) -> i32 {
    let cfg = match load_config(opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    match execute(&cfg, &opts.out_dir) {
        Ok(code) => {
            let mode = if cfg.thresholds_only() {
                "thresholds"
            } else {
                "run"
            };
            println!("{mode} -> {} (exit {code})", opts.out_dir.display());
            code
        }
        Err(e) => {
            eprintln!("output error: {e}");
            EXIT_ABORT
        }
    }
}

/// Runs a validated config, writing into `out`.
pub fn execute(cfg: &Config, out: &Path) -> std::io::Result<i32> {
    let start = Instant::now();
    fs::create_dir_all(out)?;
    let grid = cfg.grid().map_err(std::io::Error::other)?;
    let u0 = cfg.initial_field().map_err(std::io::Error::other)?;
    let flux = boundary_flux_report(&cfg.ic, &grid).map_err(std::io::Error::other)?;
    if flux.warn {
        eprintln!(
            "warning: initial data is not Neumann-consistent (mirror defect {:e} for u0, {:e} for exp(-Lap u0))",
            flux.u0_defect, flux.density_defect
        );
    }
    let thresholds =
        small_data_gate(&u0, cfg.tau().unwrap_or(0.0), cfg.threshold_c).map_err(|e| e.to_string());

    let outcome = cfg.run_config().map(|rc| run(&u0, &rc));
    let mut snapshots = Vec::new();
    let mut code = EXIT_OK;
    match &outcome {
        None => {}
        Some(Ok(traj)) => {
            write_diagnostics_csv(traj, &traj.diagnostics, &out.join("diagnostics.csv"))?;
            snapshots = write_snapshots(traj, cfg, out)?;
            if let Termination::Aborted { step, error } = &traj.termination {
                eprintln!("solver aborted at step {step}: {error}");
                code = EXIT_ABORT;
            }
        }
        Some(Err(e)) => {
            write_diagnostics_csv_empty(out)?;
            eprintln!("solver aborted before the first step: {e}");
            code = EXIT_ABORT;
        }
    }
    let manifest = manifest_text(&ManifestInput {
        config: cfg,
        u0: &u0,
        thresholds,
        flux: &flux,
        outcome: outcome.as_ref(),
        snapshots: &snapshots,
    });
    write_atomic(&out.join("manifest.txt"), manifest.as_bytes())?;
    let elapsed = start.elapsed().as_secs_f64();
    write_atomic(
        &out.join("timing.txt"),
        format!("wall_clock_seconds = {elapsed:.6}\n").as_bytes(),
    )?;
    Ok(code)
}

fn write_diagnostics_csv_empty(out: &Path) -> std::io::Result<()> {
    write_atomic(
        &out.join("diagnostics.csv"),
        crate::io::output::diagnostics_csv(&[]).as_bytes(),
    )
}
