//! Line-oriented configuration: `section.key = value`, `#` comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::{build_grid, Field, Grid};
use crate::inner::{
    DeltaSchedule, FixedPointConfig, FixedPointMethod, HeightEquation, NewtonConfig,
};
use crate::io::ic::InitialCondition;
use crate::rothe::{check_tau_constraint, RunConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(
        "step-size gate violated: tau = {tau} must be below {bound} \
         (min of 1, 1/|u0|_W22, 1/(8T)); raise time.j or set time.override_tau_gate = true"
    )]
    TauGate { tau: f64, bound: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SnapshotFormat {
    #[default]
    CsvGrid,
    PlotScript,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dim: usize,
    pub nodes: Vec<usize>,
    pub extents: Vec<f64>,
    pub t_final: f64,
    /// Absent means thresholds-only mode.
    pub steps: Option<usize>,
    pub override_tau_gate: bool,
    pub newton: NewtonConfig,
    pub schedule: DeltaSchedule,
    pub fixed_point: FixedPointConfig,
    pub height: HeightEquation,
    pub slack_factor: f64,
    pub diagnostics_every: usize,
    pub threshold_c: f64,
    pub ic: InitialCondition,
    pub snapshot_every: usize,
    pub snapshot_format: SnapshotFormat,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dim: 2,
            nodes: vec![33],
            extents: vec![1.0],
            t_final: 0.5,
            steps: None,
            override_tau_gate: false,
            newton: NewtonConfig::default(),
            schedule: DeltaSchedule::default(),
            fixed_point: FixedPointConfig::default(),
            height: HeightEquation::Helmholtz,
            slack_factor: 100.0,
            diagnostics_every: 1,
            threshold_c: 1.0,
            ic: InitialCondition::Zero,
            snapshot_every: 0,
            snapshot_format: SnapshotFormat::CsvGrid,
        }
    }
}

const KEYS: &[&str] = &[
    "grid.dim",
    "grid.nodes",
    "grid.extent",
    "time.T",
    "time.j",
    "time.override_tau_gate",
    "solver.residual_tol",
    "solver.max_newton_iters",
    "solver.damping_min",
    "solver.positivity_floor",
    "solver.linear_tol",
    "solver.linear_max_iters",
    "solver.delta_start",
    "solver.delta_shrink",
    "solver.delta_final",
    "solver.fp_tol",
    "solver.fp_max_iters",
    "solver.fp_method",
    "solver.krylov_tol",
    "solver.krylov_restart",
    "solver.variant",
    "solver.slack_factor",
    "solver.diagnostics_every",
    "thresholds.c",
    "ic.kind",
    "ic.value",
    "ic.modes",
    "ic.expr",
    "output.snapshot_every",
    "output.snapshot_format",
];

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

fn num<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Parse {
        line,
        message: format!("{key}: cannot parse {v:?}"),
    })
}

fn float(v: &str, line: usize, key: &str) -> Result<f64, ConfigError> {
    let x: f64 = num(v, line, key)?;
    if !x.is_finite() {
        return Err(ConfigError::Parse {
            line,
            message: format!("{key}: value must be finite"),
        });
    }
    Ok(x)
}

fn boolean(v: &str, line: usize, key: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Parse {
            line,
            message: format!("{key}: expected true or false, got {v:?}"),
        }),
    }
}

/// Parses without the step-size gate; see [`parse_config`].
pub fn parse_config_unchecked(text: &str) -> Result<Config, ConfigError> {
    let mut cfg = Config::default();
    let mut seen = BTreeSet::new();
    let mut kind: Option<(usize, String)> = None;
    let mut value: Option<(usize, f64)> = None;
    let mut modes: Option<(usize, String)> = None;
    let mut expr: Option<(usize, String)> = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = match raw.find('#') {
            // a '#' inside a quoted value is data
            Some(pos) if raw[..pos].matches('"').count() % 2 == 0 => &raw[..pos],
            _ => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, val)) = content.split_once('=') else {
            return Err(ConfigError::Parse {
                line,
                message: format!("expected `section.key = value`, got {content:?}"),
            });
        };
        let key = key.trim();
        let val = unquote(val);
        if !KEYS.contains(&key) {
            return Err(ConfigError::Parse {
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Parse {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
        match key {
            "grid.dim" => cfg.dim = num(val, line, key)?,
            "grid.nodes" => {
                cfg.nodes = val
                    .split_whitespace()
                    .map(|t| num(t, line, key))
                    .collect::<Result<_, _>>()?
            }
            "grid.extent" => {
                cfg.extents = val
                    .split_whitespace()
                    .map(|t| float(t, line, key))
                    .collect::<Result<_, _>>()?
            }
            "time.T" => cfg.t_final = float(val, line, key)?,
            "time.j" => cfg.steps = Some(num(val, line, key)?),
            "time.override_tau_gate" => cfg.override_tau_gate = boolean(val, line, key)?,
            "solver.residual_tol" => cfg.newton.residual_tol = float(val, line, key)?,
            "solver.max_newton_iters" => cfg.newton.max_newton_iters = num(val, line, key)?,
            "solver.damping_min" => cfg.newton.damping_min = float(val, line, key)?,
            "solver.positivity_floor" => cfg.newton.positivity_floor = float(val, line, key)?,
            "solver.linear_tol" => cfg.newton.linear.tolerance = float(val, line, key)?,
            "solver.linear_max_iters" => {
                cfg.newton.linear.max_iterations = Some(num(val, line, key)?)
            }
            "solver.delta_start" => cfg.schedule.delta_start = float(val, line, key)?,
            "solver.delta_shrink" => cfg.schedule.delta_shrink = float(val, line, key)?,
            "solver.delta_final" => cfg.schedule.delta_final = float(val, line, key)?,
            "solver.fp_tol" => cfg.fixed_point.tol = float(val, line, key)?,
            "solver.fp_max_iters" => cfg.fixed_point.max_iters = num(val, line, key)?,
            "solver.fp_method" => {
                cfg.fixed_point.method = match val {
                    "newton" => FixedPointMethod::Newton,
                    "picard" => FixedPointMethod::Picard,
                    _ => {
                        return Err(ConfigError::Parse {
                            line,
                            message: format!("{key}: expected newton or picard, got {val:?}"),
                        })
                    }
                }
            }
            "solver.krylov_tol" => cfg.fixed_point.krylov_tol = float(val, line, key)?,
            "solver.krylov_restart" => cfg.fixed_point.krylov_restart = num(val, line, key)?,
            "solver.variant" => {
                cfg.height = match val {
                    "standard" => HeightEquation::Helmholtz,
                    "positive" => HeightEquation::LogPositive,
                    _ => {
                        return Err(ConfigError::Parse {
                            line,
                            message: format!("{key}: expected standard or positive, got {val:?}"),
                        })
                    }
                }
            }
            "solver.slack_factor" => cfg.slack_factor = float(val, line, key)?,
            "solver.diagnostics_every" => cfg.diagnostics_every = num(val, line, key)?,
            "thresholds.c" => cfg.threshold_c = float(val, line, key)?,
            "ic.kind" => kind = Some((line, val.to_string())),
            "ic.value" => value = Some((line, float(val, line, key)?)),
            "ic.modes" => modes = Some((line, val.to_string())),
            "ic.expr" => expr = Some((line, val.to_string())),
            "output.snapshot_every" => cfg.snapshot_every = num(val, line, key)?,
            "output.snapshot_format" => {
                cfg.snapshot_format = match val {
                    "csv_grid" => SnapshotFormat::CsvGrid,
                    "plot_script" => SnapshotFormat::PlotScript,
                    _ => {
                        return Err(ConfigError::Parse {
                            line,
                            message: format!(
                                "{key}: expected csv_grid or plot_script, got {val:?}"
                            ),
                        })
                    }
                }
            }
            _ => unreachable!("key list and match arms disagree"),
        }
    }

    let (kind_line, kind) = kind.unwrap_or((0, "zero".into()));
    let stray = |entry: Option<(usize, String)>, name: &str| match entry {
        Some((line, _)) => Err(ConfigError::Parse {
            line,
            message: format!("ic.{name} does not apply to ic.kind = {kind}"),
        }),
        None => Ok(()),
    };
    cfg.ic = match kind.as_str() {
        "zero" => {
            stray(value.map(|(l, _)| (l, String::new())), "value")?;
            stray(modes, "modes")?;
            stray(expr, "expr")?;
            InitialCondition::Zero
        }
        "constant" => {
            stray(modes, "modes")?;
            stray(expr, "expr")?;
            let Some((_, c)) = value else {
                return Err(ConfigError::Parse {
                    line: kind_line,
                    message: "ic.kind = constant needs ic.value".into(),
                });
            };
            InitialCondition::Constant(c)
        }
        "cosine" => {
            stray(value.map(|(l, _)| (l, String::new())), "value")?;
            stray(expr, "expr")?;
            let Some((line, text)) = modes else {
                return Err(ConfigError::Parse {
                    line: kind_line,
                    message: "ic.kind = cosine needs ic.modes".into(),
                });
            };
            InitialCondition::parse_modes(&text, cfg.dim)
                .map_err(|message| ConfigError::Parse { line, message })?
        }
        "expr" => {
            stray(value.map(|(l, _)| (l, String::new())), "value")?;
            stray(modes, "modes")?;
            let Some((line, text)) = expr else {
                return Err(ConfigError::Parse {
                    line: kind_line,
                    message: "ic.kind = expr needs ic.expr".into(),
                });
            };
            InitialCondition::parse_expr(&text)
                .map_err(|message| ConfigError::Parse { line, message })?
        }
        other => {
            return Err(ConfigError::Parse {
                line: kind_line,
                message: format!("ic.kind: expected zero, constant, cosine or expr, got {other:?}"),
            })
        }
    };
    Ok(cfg)
}

/// Parses and validates, including the step-size gate unless overridden.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let cfg = parse_config_unchecked(text)?;
    cfg.validate()?;
    Ok(cfg)
}

impl Config {
    pub fn grid(&self) -> Result<Arc<Grid>, ConfigError> {
        let expand = |len: usize| -> Result<(), ConfigError> {
            if len != 1 && len != self.dim {
                return Err(ConfigError::Invalid(format!(
                    "grid lists must have 1 or {} entries, got {len}",
                    self.dim
                )));
            }
            Ok(())
        };
        expand(self.nodes.len())?;
        expand(self.extents.len())?;
        let nodes: Vec<usize> = (0..self.dim)
            .map(|i| self.nodes[i.min(self.nodes.len() - 1)])
            .collect();
        let extents: Vec<f64> = (0..self.dim)
            .map(|i| self.extents[i.min(self.extents.len() - 1)])
            .collect();
        build_grid(self.dim, &extents, &nodes).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn initial_field(&self) -> Result<Field, ConfigError> {
        let grid = self.grid()?;
        self.ic
            .build(&grid)
            .map_err(|e| ConfigError::Invalid(format!("initial condition: {e}")))
    }

    pub fn thresholds_only(&self) -> bool {
        self.steps.is_none()
    }

    pub fn tau(&self) -> Option<f64> {
        self.steps.map(|j| self.t_final / j as f64)
    }

    pub fn run_config(&self) -> Option<RunConfig> {
        let steps = self.steps?;
        Some(RunConfig {
            t_final: self.t_final,
            steps,
            newton: self.newton,
            schedule: self.schedule,
            fixed_point: self.fixed_point,
            diagnostics_every: self.diagnostics_every,
            override_tau_gate: self.override_tau_gate,
            height: self.height,
            slack_factor: self.slack_factor,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !(1..=3).contains(&self.dim) {
            return invalid(format!("grid.dim must be 1, 2 or 3, got {}", self.dim));
        }
        if !(self.t_final > 0.0) {
            return invalid(format!("time.T must be positive, got {}", self.t_final));
        }
        if self.steps == Some(0) {
            return invalid("time.j must be at least 1".into());
        }
        if !(self.threshold_c > 0.0) {
            return invalid(format!(
                "thresholds.c must be positive, got {}",
                self.threshold_c
            ));
        }
        if !(self.slack_factor >= 0.0) {
            return invalid("solver.slack_factor must be nonnegative".into());
        }
        if !(self.fixed_point.tol > 0.0) || self.fixed_point.max_iters == 0 {
            return invalid(
                "solver.fp_tol must be positive and solver.fp_max_iters at least 1".into(),
            );
        }
        if !(self.fixed_point.krylov_tol > 0.0 && self.fixed_point.krylov_tol < 1.0)
            || self.fixed_point.krylov_restart == 0
        {
            return invalid(
                "solver.krylov_tol must lie in (0, 1) and solver.krylov_restart be positive".into(),
            );
        }
        self.newton
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let u0 = self.initial_field()?;
        if self.height == HeightEquation::LogPositive && u0.values().iter().any(|&x| !(x > 0.0)) {
            return invalid("solver.variant = positive needs u0 > 0 at every node".into());
        }
        if let Some(j) = self.steps {
            let report = check_tau_constraint(&u0, self.t_final, j);
            if !report.pass && !self.override_tau_gate {
                return Err(ConfigError::TauGate {
                    tau: report.tau,
                    bound: report.bound,
                });
            }
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order, shortest round-trip numbers.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let f = |x: f64| format!("{x:e}");
        let join_f = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let join_u = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("grid.dim", self.dim.to_string());
        put("grid.nodes", join_u(&self.nodes));
        put("grid.extent", join_f(&self.extents));
        put("time.T", f(self.t_final));
        if let Some(j) = self.steps {
            put("time.j", j.to_string());
        }
        put("time.override_tau_gate", self.override_tau_gate.to_string());
        put("solver.residual_tol", f(self.newton.residual_tol));
        put(
            "solver.max_newton_iters",
            self.newton.max_newton_iters.to_string(),
        );
        put("solver.damping_min", f(self.newton.damping_min));
        put("solver.positivity_floor", f(self.newton.positivity_floor));
        put("solver.linear_tol", f(self.newton.linear.tolerance));
        if let Some(m) = self.newton.linear.max_iterations {
            put("solver.linear_max_iters", m.to_string());
        }
        put("solver.delta_start", f(self.schedule.delta_start));
        put("solver.delta_shrink", f(self.schedule.delta_shrink));
        put("solver.delta_final", f(self.schedule.delta_final));
        put("solver.fp_tol", f(self.fixed_point.tol));
        put(
            "solver.fp_max_iters",
            self.fixed_point.max_iters.to_string(),
        );
        put(
            "solver.fp_method",
            match self.fixed_point.method {
                FixedPointMethod::Newton => "newton",
                FixedPointMethod::Picard => "picard",
            }
            .into(),
        );
        put("solver.krylov_tol", f(self.fixed_point.krylov_tol));
        put(
            "solver.krylov_restart",
            self.fixed_point.krylov_restart.to_string(),
        );
        put(
            "solver.variant",
            match self.height {
                HeightEquation::Helmholtz => "standard",
                HeightEquation::LogPositive => "positive",
            }
            .into(),
        );
        put("solver.slack_factor", f(self.slack_factor));
        put(
            "solver.diagnostics_every",
            self.diagnostics_every.to_string(),
        );
        put("thresholds.c", f(self.threshold_c));
        match &self.ic {
            InitialCondition::Zero => put("ic.kind", "zero".into()),
            InitialCondition::Constant(c) => {
                put("ic.kind", "constant".into());
                put("ic.value", f(*c));
            }
            InitialCondition::Cosine(_) => {
                put("ic.kind", "cosine".into());
                put("ic.modes", format!("\"{}\"", self.ic.modes_text()));
            }
            InitialCondition::Expr(e) => {
                put("ic.kind", "expr".into());
                put("ic.expr", format!("\"{e}\""));
            }
        }
        put("output.snapshot_every", self.snapshot_every.to_string());
        put(
            "output.snapshot_format",
            match self.snapshot_format {
                SnapshotFormat::CsvGrid => "csv_grid",
                SnapshotFormat::PlotScript => "plot_script",
            }
            .into(),
        );
        s
    }
}
