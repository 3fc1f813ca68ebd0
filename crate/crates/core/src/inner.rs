//! The nonlinear elliptic problems solved inside one time step.
//!
//! * `-L rho + rho + tau * psi_delta(rho) = f`, the regularized density
//!   equation, and its exact-logarithm limit.
//! * The map `B`: given a height guess `w` and the previous height `v`,
//!   solve the density equation with right side `1 - (w - v) / tau`, then
//!   `-L u + tau u = ln rho`, and return `u`.
//! * The time step itself, a fixed point `u = B(u)`.
//!
//! The fixed point is computed by a Newton iteration on `u - B(u)` whose
//! Jacobian-vector products come from the linearization of `B`, damped by a
//! factor `theta` that halves whenever the fixed-point residual grows. Plain
//! damped Picard iteration is available too, but it only contracts when
//! `tau^2 (1 + tau) > 1` roughly: on the mean mode `B` has Lipschitz constant
//! `1 / (tau^2 (1 + tau))`.

use std::sync::Arc;

use thiserror::Error;

use crate::elliptic::{gmres, solve_shifted, GmresError, LinearSolveConfig, SolveError};
use crate::grid::{max_abs, norm2, Field, Grid, GridError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InnerError {
    #[error("psi_delta with delta = 0 is undefined at s = {0}")]
    Domain(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("Newton stalled after {iterations} iterations with residual {residual:.3e}")]
    NewtonStall { iterations: usize, residual: f64 },
    #[error("positivity lost: minimum value {min:.3e} below the floor {floor:.3e}")]
    PositivityLoss { min: f64, floor: f64 },
    #[error(
        "fixed-point iteration did not converge after {iterations} iterations \
         (update {update:.3e}, residuals {rho_residual:.3e} / {u_residual:.3e}); try a smaller tau"
    )]
    FixedPointNonConvergence {
        iterations: usize,
        update: f64,
        rho_residual: f64,
        u_residual: f64,
    },
    #[error(transparent)]
    Linear(#[from] SolveError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Absolute nodal residual target.
    pub residual_tol: f64,
    pub max_newton_iters: usize,
    /// Smallest line-search factor before the iteration is declared stalled.
    pub damping_min: f64,
    /// Underflow guard for strictly positive unknowns.
    pub positivity_floor: f64,
    /// Linear solves for Newton directions and the height equation.
    pub linear: LinearSolveConfig,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            residual_tol: 1e-10,
            max_newton_iters: 50,
            damping_min: 1e-4,
            positivity_floor: 1e-300,
            linear: LinearSolveConfig::with_tolerance(1e-12),
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<(), InnerError> {
        if !(self.residual_tol > 0.0) {
            return Err(InnerError::InvalidParameter(format!(
                "residual_tol must be positive, got {}",
                self.residual_tol
            )));
        }
        if !(self.damping_min > 0.0 && self.damping_min <= 1.0) {
            return Err(InnerError::InvalidParameter(format!(
                "damping_min must lie in (0, 1], got {}",
                self.damping_min
            )));
        }
        if self.max_newton_iters == 0 {
            return Err(InnerError::InvalidParameter(
                "max_newton_iters must be at least 1".into(),
            ));
        }
        if !(self.positivity_floor >= 0.0) {
            return Err(InnerError::InvalidParameter(
                "positivity_floor must be nonnegative".into(),
            ));
        }
        self.linear.validate()?;
        Ok(())
    }
}

/// Continuation in the regularization parameter of `psi_delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSchedule {
    pub delta_start: f64,
    pub delta_shrink: f64,
    /// Zero switches to the exact logarithm once iterates are safely positive.
    pub delta_final: f64,
}

impl Default for DeltaSchedule {
    fn default() -> Self {
        Self {
            delta_start: 1e-2,
            delta_shrink: 0.1,
            delta_final: 0.0,
        }
    }
}

impl DeltaSchedule {
    pub fn validate(&self) -> Result<(), InnerError> {
        if !(self.delta_start > 0.0 && self.delta_start < 1.0) {
            return Err(InnerError::InvalidParameter(format!(
                "delta_start must lie in (0, 1), got {}",
                self.delta_start
            )));
        }
        if !(self.delta_shrink > 0.0 && self.delta_shrink < 1.0) {
            return Err(InnerError::InvalidParameter(format!(
                "delta_shrink must lie in (0, 1), got {}",
                self.delta_shrink
            )));
        }
        if !(self.delta_final >= 0.0 && self.delta_final < 1.0) {
            return Err(InnerError::InvalidParameter(format!(
                "delta_final must lie in [0, 1), got {}",
                self.delta_final
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FixedPointMethod {
    /// Newton on `u - B(u)` with GMRES for the linearized map.
    #[default]
    Newton,
    /// `u <- (1 - theta) u + theta B(u)`.
    Picard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    /// Max-norm bound on `u - B(u)`, the gap between successive Picard iterates.
    pub tol: f64,
    pub max_iters: usize,
    pub method: FixedPointMethod,
    /// Relative tolerance for the linearized solve of each Newton update.
    pub krylov_tol: f64,
    pub krylov_restart: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 50,
            method: FixedPointMethod::Newton,
            krylov_tol: 1e-9,
            krylov_restart: 40,
        }
    }
}

/// Smallest damping factor of the outer iteration.
pub const THETA_FLOOR: f64 = 1.0 / 64.0;

/// `psi_delta(s) = ln(s + delta)` for `s > 0`, `ln(delta)` otherwise.
pub fn psi_delta(s: f64, delta: f64) -> Result<f64, InnerError> {
    if !(0.0..1.0).contains(&delta) {
        return Err(InnerError::InvalidParameter(format!(
            "delta must lie in [0, 1), got {delta}"
        )));
    }
    if s > 0.0 {
        Ok((s + delta).ln())
    } else if delta > 0.0 {
        Ok(delta.ln())
    } else {
        Err(InnerError::Domain(s))
    }
}

fn psi_delta_prime(s: f64, delta: f64) -> f64 {
    if s > 0.0 {
        1.0 / (s + delta)
    } else {
        0.0
    }
}

/// Nodal law `s -> linear * s + tau * psi_delta(s)`; monotone in `s`.
#[derive(Debug, Clone, Copy)]
struct NodalLaw {
    linear: f64,
    tau: f64,
    delta: f64,
}

impl NodalLaw {
    fn value(&self, s: f64) -> f64 {
        let psi = if s > 0.0 {
            (s + self.delta).ln()
        } else if self.delta > 0.0 {
            self.delta.ln()
        } else {
            f64::NAN
        };
        self.linear * s + self.tau * psi
    }

    fn derivative(&self, s: f64) -> f64 {
        self.linear + self.tau * psi_delta_prime(s, self.delta)
    }

    fn admissible(&self, s: f64) -> bool {
        self.delta > 0.0 || s > 0.0
    }

    /// Root of `value(s) = target`, used as the pointwise initial guess.
    fn scalar_root(&self, target: f64) -> f64 {
        if self.delta > 0.0 && self.linear > 0.0 {
            let at_zero = self.tau * self.delta.ln();
            if target <= at_zero {
                return (target - at_zero) / self.linear;
            }
        }
        if self.linear == 0.0 && self.delta == 0.0 {
            return (target / self.tau).exp().max(f64::MIN_POSITIVE);
        }
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        while self.value(hi) < target {
            lo = hi;
            hi *= 2.0;
            if !hi.is_finite() {
                return f64::MAX;
            }
        }
        if lo == 0.0 {
            // the root may be tiny when delta = 0; shrink geometrically first
            let mut small = hi;
            while small > 1e-300 && self.value(small) > target {
                hi = small;
                small *= 0.5;
            }
            lo = small;
            if self.value(lo) > target {
                return lo;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.value(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NewtonStats {
    pub iterations: usize,
    pub residual: f64,
}

fn law_residual(grid: &Grid, law: &NodalLaw, x: &[f64], f: &[f64], out: &mut [f64]) {
    grid.apply_laplacian(x, out);
    for ((o, &xi), &fi) in out.iter_mut().zip(x).zip(f) {
        *o = law.value(xi) - *o - fi;
    }
}

/// Damped Newton for `-L x + law(x) = f` with Armijo backtracking.
fn newton_solve(
    grid: &Arc<Grid>,
    law: &NodalLaw,
    f: &[f64],
    mut x: Vec<f64>,
    cfg: &NewtonConfig,
) -> Result<(Vec<f64>, NewtonStats), InnerError> {
    let n = f.len();
    if x.iter().any(|&s| !law.admissible(s)) {
        return Err(InnerError::Precondition(
            "initial guess outside the domain of the logarithm".into(),
        ));
    }
    let stencil = grid.stencil_diagonal();
    let mut res = vec![0.0; n];
    let mut trial_res = vec![0.0; n];
    law_residual(grid, law, &x, f, &mut res);
    let mut inf_norm = max_abs(&res);
    let mut merit = norm2(&res);
    let mut iterations = 0;

    loop {
        // iterate past residual_tol to the rounding floor, so downstream
        // maps see a density that is accurate well below the tolerance
        let scale = stencil * max_abs(&x) + max_abs(f) + 1.0;
        let polish = (1e-3 * cfg.residual_tol).max(64.0 * f64::EPSILON * scale);
        if inf_norm <= polish {
            break;
        }
        if iterations >= cfg.max_newton_iters {
            if inf_norm <= cfg.residual_tol {
                break;
            }
            return Err(InnerError::NewtonStall {
                iterations,
                residual: inf_norm,
            });
        }
        let shift: Vec<f64> = x.iter().map(|&s| law.derivative(s)).collect();
        let rhs = Field::from_vec_unchecked(grid.clone(), res.iter().map(|r| -r).collect());
        let (dir, _) = solve_shifted(&shift, &rhs, None, &cfg.linear)?;
        let dir = dir.into_values();

        let mut lambda = 1.0;
        let mut accepted = false;
        let mut trial = vec![0.0; n];
        while lambda >= cfg.damping_min {
            for i in 0..n {
                trial[i] = x[i] + lambda * dir[i];
            }
            if trial.iter().all(|&s| law.admissible(s)) {
                law_residual(grid, law, &trial, f, &mut trial_res);
                let trial_merit = norm2(&trial_res);
                if trial_merit.is_finite() && trial_merit <= (1.0 - 1e-4 * lambda) * merit {
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        iterations += 1;
        if !accepted {
            if inf_norm <= cfg.residual_tol {
                break;
            }
            return Err(InnerError::NewtonStall {
                iterations,
                residual: inf_norm,
            });
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut res, &mut trial_res);
        inf_norm = max_abs(&res);
        merit = norm2(&res);
    }
    Ok((
        x,
        NewtonStats {
            iterations,
            residual: inf_norm,
        },
    ))
}

fn check_tau(tau: f64) -> Result<(), InnerError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(InnerError::InvalidParameter(format!(
            "tau must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn density_law(tau: f64, delta: f64) -> NodalLaw {
    NodalLaw {
        linear: 1.0,
        tau,
        delta,
    }
}

fn pointwise_guess(law: &NodalLaw, f: &[f64]) -> Vec<f64> {
    f.iter().map(|&fi| law.scalar_root(fi)).collect()
}

/// Newton from whichever of the warm start and the pointwise root has the
/// smaller residual, retrying from the other on failure. Near the kink of
/// `psi_delta` at zero a warm start from the previous level can sit on the
/// wrong side and stall.
fn newton_from_best(
    grid: &Arc<Grid>,
    law: &NodalLaw,
    f: &[f64],
    warm: Vec<f64>,
    cfg: &NewtonConfig,
) -> Result<(Vec<f64>, NewtonStats), InnerError> {
    let pointwise = pointwise_guess(law, f);
    let mut scratch = vec![0.0; f.len()];
    let mut merit = |x: &[f64]| {
        if x.iter().all(|&s| law.admissible(s)) {
            law_residual(grid, law, x, f, &mut scratch);
            let m = norm2(&scratch);
            if m.is_finite() {
                return m;
            }
        }
        f64::INFINITY
    };
    let (first, second) = if merit(&pointwise) < merit(&warm) {
        (pointwise, warm)
    } else {
        (warm, pointwise)
    };
    match newton_solve(grid, law, f, first, cfg) {
        Ok(done) => Ok(done),
        Err(err) => newton_solve(grid, law, f, second, cfg).map_err(|_| err),
    }
}

/// Solves `-L rho + rho + tau psi_delta(rho) = f` for a fixed `delta` in (0, 1).
pub fn solve_rho_regularized(
    f: &Field,
    tau: f64,
    delta: f64,
    cfg: &NewtonConfig,
) -> Result<Field, InnerError> {
    check_tau(tau)?;
    cfg.validate()?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(InnerError::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let law = density_law(tau, delta);
    let guess = pointwise_guess(&law, f.values());
    let (x, _) = newton_solve(f.grid(), &law, f.values(), guess, cfg)?;
    Ok(Field::new(f.grid().clone(), x)?)
}

/// Solves `-L rho + rho + tau ln rho = f` by continuation in `delta`.
pub fn solve_rho(
    f: &Field,
    tau: f64,
    schedule: &DeltaSchedule,
    cfg: &NewtonConfig,
) -> Result<Field, InnerError> {
    solve_rho_with_stats(f, tau, schedule, cfg).map(|(rho, _)| rho)
}

pub(crate) fn solve_rho_with_stats(
    f: &Field,
    tau: f64,
    schedule: &DeltaSchedule,
    cfg: &NewtonConfig,
) -> Result<(Field, NewtonStats), InnerError> {
    check_tau(tau)?;
    cfg.validate()?;
    schedule.validate()?;
    let grid = f.grid();
    let mut delta = schedule.delta_start;
    let mut x = pointwise_guess(&density_law(tau, delta), f.values());
    let mut total = 0;
    let mut levels = 0;
    loop {
        let (next, stats) = newton_from_best(grid, &density_law(tau, delta), f.values(), x, cfg)?;
        x = next;
        total += stats.iterations;
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        if schedule.delta_final > 0.0 && delta <= schedule.delta_final {
            if min <= cfg.positivity_floor {
                return Err(InnerError::PositivityLoss {
                    min,
                    floor: cfg.positivity_floor,
                });
            }
            return Ok((
                Field::new(grid.clone(), x)?,
                NewtonStats {
                    iterations: total,
                    residual: stats.residual,
                },
            ));
        }
        if schedule.delta_final == 0.0 && min > 10.0 * delta {
            break;
        }
        levels += 1;
        if levels > 300 {
            return Err(InnerError::PositivityLoss {
                min,
                floor: cfg.positivity_floor,
            });
        }
        delta = (delta * schedule.delta_shrink).max(schedule.delta_final);
    }
    let (x, stats) = newton_from_best(grid, &density_law(tau, 0.0), f.values(), x, cfg)?;
    total += stats.iterations;
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= cfg.positivity_floor {
        return Err(InnerError::PositivityLoss {
            min,
            floor: cfg.positivity_floor,
        });
    }
    Ok((
        Field::new(grid.clone(), x)?,
        NewtonStats {
            iterations: total,
            residual: stats.residual,
        },
    ))
}

/// Exact-log Newton from a warm start, with the continuation solver as fallback.
fn solve_rho_warm(
    f: &Field,
    tau: f64,
    guess: Option<&[f64]>,
    schedule: &DeltaSchedule,
    cfg: &NewtonConfig,
) -> Result<(Field, NewtonStats), InnerError> {
    if let Some(g) = guess {
        if g.iter().all(|&s| s > cfg.positivity_floor) {
            let attempt = newton_solve(
                f.grid(),
                &density_law(tau, 0.0),
                f.values(),
                g.to_vec(),
                cfg,
            );
            if let Ok((x, stats)) = attempt {
                if x.iter().all(|&s| s > cfg.positivity_floor) {
                    return Ok((Field::new(f.grid().clone(), x)?, stats));
                }
            }
        }
    }
    solve_rho_with_stats(f, tau, schedule, cfg)
}

/// Which height equation closes the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeightEquation {
    /// `-L u + tau u = ln rho`.
    #[default]
    Helmholtz,
    /// `-L u + tau ln u = ln rho`, keeping `u > 0` (experimental).
    LogPositive,
}

/// `u = B(w)` together with the intermediate density.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMapOutput {
    pub u: Field,
    pub rho: Field,
    pub newton_iters: usize,
}

struct StepProblem<'a> {
    grid: Arc<Grid>,
    v: &'a Field,
    tau: f64,
    schedule: &'a DeltaSchedule,
    cfg: &'a NewtonConfig,
    height: HeightEquation,
}

impl StepProblem<'_> {
    fn density_rhs(&self, w: &[f64]) -> Field {
        let vals = w
            .iter()
            .zip(self.v.values())
            .map(|(wi, vi)| 1.0 - (wi - vi) / self.tau)
            .collect();
        Field::from_vec_unchecked(self.grid.clone(), vals)
    }

    fn eval(
        &self,
        w: &[f64],
        rho_guess: Option<&[f64]>,
        u_guess: Option<&[f64]>,
    ) -> Result<StepMapOutput, InnerError> {
        let f = self.density_rhs(w);
        if f.values().iter().any(|v| !v.is_finite()) {
            return Err(InnerError::Grid(GridError::NonFinite { index: 0 }));
        }
        let (rho, rho_stats) = solve_rho_warm(&f, self.tau, rho_guess, self.schedule, self.cfg)?;
        let log_rho = rho.map(f64::ln)?;
        let (u, u_iters) = match self.height {
            HeightEquation::Helmholtz => {
                let shift = vec![self.tau; w.len()];
                let (u, _) = solve_shifted(&shift, &log_rho, u_guess, &self.cfg.linear)?;
                (u, 0)
            }
            HeightEquation::LogPositive => {
                let law = NodalLaw {
                    linear: 0.0,
                    tau: self.tau,
                    delta: 0.0,
                };
                let guess = match u_guess {
                    Some(g) if g.iter().all(|&s| s > 0.0) => g.to_vec(),
                    _ => pointwise_guess(&law, log_rho.values()),
                };
                let (x, stats) = newton_solve(&self.grid, &law, log_rho.values(), guess, self.cfg)?;
                let min = x.iter().copied().fold(f64::INFINITY, f64::min);
                if min <= self.cfg.positivity_floor {
                    return Err(InnerError::PositivityLoss {
                        min,
                        floor: self.cfg.positivity_floor,
                    });
                }
                (Field::new(self.grid.clone(), x)?, stats.iterations)
            }
        };
        Ok(StepMapOutput {
            u,
            rho,
            newton_iters: rho_stats.iterations + u_iters,
        })
    }

    /// Density consistent with the previous height, `exp(-L v + tau v)` (or
    /// `exp(-L v + tau ln v)`), and the height whose density solve returns it.
    fn predictor(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let v = self.v.values();
        let n = v.len();
        let mut lv = vec![0.0; n];
        self.grid.apply_laplacian(v, &mut lv);
        let mut rho = Vec::with_capacity(n);
        for i in 0..n {
            let height = match self.height {
                HeightEquation::Helmholtz => self.tau * v[i],
                HeightEquation::LogPositive => self.tau * v[i].ln(),
            };
            let r = (height - lv[i]).exp();
            if !(r.is_finite() && r > 0.0) {
                return None;
            }
            rho.push(r);
        }
        let mut lr = vec![0.0; n];
        self.grid.apply_laplacian(&rho, &mut lr);
        let w: Vec<f64> = (0..n)
            .map(|i| v[i] + self.tau * (1.0 - rho[i] + lr[i] - self.tau * rho[i].ln()))
            .collect();
        w.iter().all(|x| x.is_finite()).then_some((w, rho))
    }

    /// Height from the density equation, `v + tau (1 - rho + L rho - tau ln rho)`.
    fn height_from_density(&self, rho: &[f64], out: &mut [f64]) {
        self.grid.apply_laplacian(rho, out);
        for ((o, &r), &v) in out.iter_mut().zip(rho).zip(self.v.values()) {
            *o = v + self.tau * (1.0 - r + *o - self.tau * r.ln());
        }
    }

    /// Height-equation residual with `u` eliminated through the density equation.
    fn density_residual(&self, rho: &[f64], u: &mut [f64], out: &mut [f64]) -> bool {
        self.height_from_density(rho, u);
        if self.height == HeightEquation::LogPositive && u.iter().any(|&x| !(x > 0.0)) {
            return false;
        }
        self.grid.apply_laplacian(u, out);
        for i in 0..u.len() {
            let h = match self.height {
                HeightEquation::Helmholtz => self.tau * u[i],
                HeightEquation::LogPositive => self.tau * u[i].ln(),
            };
            out[i] = h - out[i] - rho[i].ln();
        }
        out.iter().all(|x| x.is_finite())
    }

    /// Newton on the density alone. The height map `w -> B(w)` has gain
    /// `1/tau^2` on the mean mode, which shrinks the Newton region in `w` to
    /// almost nothing; in the density the mean-mode gain is of order one.
    /// Returns the height, the density and the iteration count.
    fn density_newton(
        &self,
        mut rho: Vec<f64>,
        fp: &FixedPointConfig,
    ) -> Result<(Vec<f64>, Vec<f64>, usize), InnerError> {
        let n = rho.len();
        let mut u = vec![0.0; n];
        let mut res = vec![0.0; n];
        if !self.density_residual(&rho, &mut u, &mut res) {
            return Err(InnerError::Precondition(
                "predictor left the admissible set".into(),
            ));
        }
        let lin = LinearSolveConfig {
            tolerance: 1e-11,
            max_iterations: self.cfg.linear.max_iterations,
        };
        let target = 0.1 * self.cfg.residual_tol;
        let mut merit = self.grid.dot(&res, &res).sqrt();
        let mut iters = 0;
        let mut trial = vec![0.0; n];
        let mut trial_u = vec![0.0; n];
        let mut trial_res = vec![0.0; n];
        while max_abs(&res) > target && iters < self.cfg.max_newton_iters {
            // (tau S M + D) d = R, right-preconditioned by (tau S M)^-1
            let density_shift: Vec<f64> = rho.iter().map(|r| 1.0 + self.tau / r).collect();
            let height_shift: Vec<f64> = match self.height {
                HeightEquation::Helmholtz => vec![self.tau; n],
                HeightEquation::LogPositive => u.iter().map(|x| self.tau / x).collect(),
            };
            let precond = |y: &[f64]| -> Result<Vec<f64>, InnerError> {
                let f = Field::from_vec_unchecked(
                    self.grid.clone(),
                    y.iter().map(|x| x / self.tau).collect(),
                );
                let (a, _) = solve_shifted(&height_shift, &f, None, &lin)?;
                let (b, _) = solve_shifted(&density_shift, &a, None, &lin)?;
                Ok(b.into_values())
            };
            let solved = gmres(
                &self.grid,
                |y, out| {
                    let z = precond(y)?;
                    for i in 0..n {
                        out[i] = y[i] + z[i] / rho[i];
                    }
                    Ok(())
                },
                &res,
                fp.krylov_restart,
                fp.krylov_tol,
                10 * fp.krylov_restart,
            );
            let y = match solved {
                Ok((y, _)) => y,
                Err(GmresError::Operator(e)) => return Err(e),
                Err(GmresError::NonConvergence {
                    iterations,
                    relative_residual,
                }) => {
                    return Err(InnerError::NewtonStall {
                        iterations,
                        residual: relative_residual,
                    })
                }
            };
            let dir = precond(&y)?;
            let mut lambda = 1.0;
            let mut accepted = false;
            while lambda >= self.cfg.damping_min {
                for i in 0..n {
                    trial[i] = rho[i] + lambda * dir[i];
                }
                if trial.iter().all(|&r| r > self.cfg.positivity_floor)
                    && self.density_residual(&trial, &mut trial_u, &mut trial_res)
                {
                    let m = self.grid.dot(&trial_res, &trial_res).sqrt();
                    if m <= (1.0 - 1e-4 * lambda) * merit {
                        merit = m;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            iters += 1;
            if !accepted {
                // rounding floor of the fourth-order residual
                break;
            }
            std::mem::swap(&mut rho, &mut trial);
            std::mem::swap(&mut u, &mut trial_u);
            std::mem::swap(&mut res, &mut trial_res);
        }
        Ok((u, rho, iters))
    }

    /// Nodal residuals of the density and height equations at `(u, rho)`.
    fn residuals(&self, u: &[f64], rho: &[f64]) -> (f64, f64) {
        let n = u.len();
        let mut lr = vec![0.0; n];
        let mut lu = vec![0.0; n];
        self.grid.apply_laplacian(rho, &mut lr);
        self.grid.apply_laplacian(u, &mut lu);
        let mut r1 = 0.0f64;
        let mut r2 = 0.0f64;
        for i in 0..n {
            let log_rho = rho[i].ln();
            let a =
                (u[i] - self.v.values()[i]) / self.tau + rho[i] - lr[i] + self.tau * log_rho - 1.0;
            let height = match self.height {
                HeightEquation::Helmholtz => self.tau * u[i],
                HeightEquation::LogPositive => self.tau * u[i].ln(),
            };
            let b = height - lu[i] - log_rho;
            r1 = r1.max(a.abs());
            r2 = r2.max(b.abs());
        }
        (r1, r2)
    }

    /// `(I - B'(w)) d` with `B'` linearized at the density and height of `at`.
    fn apply_fixed_point_jacobian(
        &self,
        at: &StepMapOutput,
        d: &[f64],
        out: &mut [f64],
    ) -> Result<(), InnerError> {
        let lin = LinearSolveConfig {
            tolerance: 1e-11,
            max_iterations: self.cfg.linear.max_iterations,
        };
        let rho = at.rho.values();
        let density_shift: Vec<f64> = rho.iter().map(|r| 1.0 + self.tau / r).collect();
        let rhs =
            Field::from_vec_unchecked(self.grid.clone(), d.iter().map(|x| -x / self.tau).collect());
        let (drho, _) = solve_shifted(&density_shift, &rhs, None, &lin)?;
        let height_shift: Vec<f64> = match self.height {
            HeightEquation::Helmholtz => vec![self.tau; d.len()],
            HeightEquation::LogPositive => at.u.values().iter().map(|u| self.tau / u).collect(),
        };
        let rhs = Field::from_vec_unchecked(
            self.grid.clone(),
            drho.values()
                .iter()
                .zip(rho)
                .map(|(dr, r)| dr / r)
                .collect(),
        );
        let (du, _) = solve_shifted(&height_shift, &rhs, None, &lin)?;
        for ((o, di), dui) in out.iter_mut().zip(d).zip(du.values()) {
            *o = di - dui;
        }
        Ok(())
    }
}

/// Evaluates `B(w)` for the previous height `v`.
pub fn step_map_b(
    w: &Field,
    v: &Field,
    tau: f64,
    schedule: &DeltaSchedule,
    cfg: &NewtonConfig,
) -> Result<StepMapOutput, InnerError> {
    check_tau(tau)?;
    cfg.validate()?;
    if !w.same_grid(v) {
        return Err(GridError::GridMismatch.into());
    }
    let problem = StepProblem {
        grid: w.grid().clone(),
        v,
        tau,
        schedule,
        cfg,
        height: HeightEquation::Helmholtz,
    };
    problem.eval(w.values(), None, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledStepResult {
    pub u: Field,
    pub rho: Field,
    /// Accepted outer iterates, counting the initial one.
    pub fixed_point_iters: usize,
    /// Inner Newton iterations summed over all evaluations of `B`.
    pub newton_iters: usize,
    /// Max-norm residuals of the density and height equations.
    pub final_residuals: (f64, f64),
    /// Set for the positive-height variant.
    pub experimental: bool,
}

/// One implicit step: `(u - u_prev)/tau + rho - L rho + tau ln rho = 1`,
/// `-L u + tau u = ln rho`.
pub fn solve_coupled_step(
    u_prev: &Field,
    tau: f64,
    schedule: &DeltaSchedule,
    cfg: &NewtonConfig,
    fp: &FixedPointConfig,
) -> Result<CoupledStepResult, InnerError> {
    coupled_step(u_prev, tau, schedule, cfg, fp, HeightEquation::Helmholtz)
}

/// Step of the positive-height system where the height equation is
/// `-L u + tau ln u = ln rho`. Experimental.
pub fn solve_positive_variant_step(
    u_prev: &Field,
    tau: f64,
    schedule: &DeltaSchedule,
    cfg: &NewtonConfig,
    fp: &FixedPointConfig,
) -> Result<CoupledStepResult, InnerError> {
    if let Some(min) = u_prev.values().iter().copied().find(|&x| !(x > 0.0)) {
        return Err(InnerError::Precondition(format!(
            "positive variant needs u_prev > 0 everywhere (found {min})"
        )));
    }
    coupled_step(u_prev, tau, schedule, cfg, fp, HeightEquation::LogPositive)
}

pub(crate) fn coupled_step(
    u_prev: &Field,
    tau: f64,
    schedule: &DeltaSchedule,
    cfg: &NewtonConfig,
    fp: &FixedPointConfig,
    height: HeightEquation,
) -> Result<CoupledStepResult, InnerError> {
    check_tau(tau)?;
    cfg.validate()?;
    schedule.validate()?;
    if !(fp.tol > 0.0) || fp.max_iters == 0 {
        return Err(InnerError::InvalidParameter(
            "fixed-point tolerance must be positive and max_iters at least 1".into(),
        ));
    }
    let problem = StepProblem {
        grid: u_prev.grid().clone(),
        v: u_prev,
        tau,
        schedule,
        cfg,
        height,
    };
    let n = u_prev.len();
    let admissible = |w: &[f64]| match height {
        HeightEquation::Helmholtz => true,
        HeightEquation::LogPositive => w.iter().all(|&x| x > 0.0),
    };

    // Starting from w = u_prev would force rho close to 1, far from the
    // previous density; the explicit predictor below reproduces that density
    // exactly, which keeps Newton in its quadratic regime.
    let mut start_iters = 0;
    let start = problem.predictor().and_then(|(w0, rho0)| {
        if fp.method == FixedPointMethod::Newton {
            if let Ok((w1, rho1, it)) = problem.density_newton(rho0.clone(), fp) {
                start_iters = it;
                if admissible(&w1) {
                    return Some((w1, rho1));
                }
            }
        }
        admissible(&w0).then_some((w0, rho0))
    });
    let evaluated = start.and_then(|(w0, rho0)| {
        problem
            .eval(&w0, Some(&rho0), Some(u_prev.values()))
            .ok()
            .map(|ev| (w0, ev))
    });
    let (mut w, mut current) = match evaluated {
        Some(pair) => pair,
        None => (
            u_prev.values().to_vec(),
            problem.eval(u_prev.values(), None, None)?,
        ),
    };
    let mut newton_iters = current.newton_iters + start_iters;
    let mut gap: Vec<f64> = w
        .iter()
        .zip(current.u.values())
        .map(|(a, b)| a - b)
        .collect();
    let mut iters = 1;
    let mut theta = 1.0f64;

    loop {
        let (r1, r2) = problem.residuals(&w, current.rho.values());
        let residuals_ok = r1 <= cfg.residual_tol && r2 <= cfg.residual_tol;
        let gap_norm = max_abs(&gap);
        let done = |w: Vec<f64>, current: StepMapOutput, newton_iters: usize| {
            Ok(CoupledStepResult {
                u: Field::new(problem.grid.clone(), w)?,
                rho: current.rho,
                fixed_point_iters: iters,
                newton_iters,
                final_residuals: (r1, r2),
                experimental: height == HeightEquation::LogPositive,
            })
        };
        // the gap is the distance to the next Picard iterate
        if gap_norm <= fp.tol && residuals_ok {
            return done(w, current, newton_iters);
        }
        let fail = |update: f64| InnerError::FixedPointNonConvergence {
            iterations: iters,
            update,
            rho_residual: r1,
            u_residual: r2,
        };
        if iters >= fp.max_iters {
            return Err(fail(gap_norm));
        }

        let direction: Vec<f64> = match fp.method {
            FixedPointMethod::Picard => gap.iter().map(|g| -g).collect(),
            FixedPointMethod::Newton => {
                let rhs: Vec<f64> = gap.iter().map(|g| -g).collect();
                let solved = gmres(
                    &problem.grid,
                    |d, out| problem.apply_fixed_point_jacobian(&current, d, out),
                    &rhs,
                    fp.krylov_restart,
                    fp.krylov_tol,
                    10 * fp.krylov_restart,
                );
                match solved {
                    Ok((d, _)) => d,
                    Err(GmresError::Operator(e)) => return Err(e),
                    Err(GmresError::NonConvergence { .. }) => return Err(fail(gap_norm)),
                }
            }
        };
        // For Newton the next iterate is w + d. Its size is the well-conditioned
        // distance to the fixed point, while the gap carries rounding from the
        // density solve amplified by 1/tau^2 on the mean mode.
        if fp.method == FixedPointMethod::Newton && max_abs(&direction) <= fp.tol && residuals_ok {
            return done(w, current, newton_iters);
        }
        let update = match fp.method {
            FixedPointMethod::Picard => gap_norm,
            FixedPointMethod::Newton => max_abs(&direction),
        };
        let merit = problem.grid.dot(&gap, &gap).sqrt();
        let mut accepted = None;
        while theta >= THETA_FLOOR {
            let trial: Vec<f64> = (0..n).map(|i| w[i] + theta * direction[i]).collect();
            if admissible(&trial) {
                if let Ok(next) =
                    problem.eval(&trial, Some(current.rho.values()), Some(current.u.values()))
                {
                    newton_iters += next.newton_iters;
                    let next_gap: Vec<f64> = trial
                        .iter()
                        .zip(next.u.values())
                        .map(|(a, b)| a - b)
                        .collect();
                    let next_merit = problem.grid.dot(&next_gap, &next_gap).sqrt();
                    // near the rounding floor the merit stops decreasing, so
                    // steps that are already below tolerance are taken as is
                    if next_merit < merit || max_abs(&next_gap) <= fp.tol {
                        accepted = Some((trial, next, next_gap));
                        break;
                    }
                }
            }
            theta *= 0.5;
        }
        let Some((trial, next, next_gap)) = accepted else {
            return Err(fail(update));
        };
        w = trial;
        current = next;
        gap = next_gap;
        iters += 1;
        theta = (2.0 * theta).min(1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, integrate, laplacian_neumann};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        assert!(f(lo) < 0.0 && f(hi) > 0.0);
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn line(n: usize) -> Arc<Grid> {
        build_grid(1, &[1.0], &[n]).unwrap()
    }

    fn square(n: usize) -> Arc<Grid> {
        build_grid(2, &[1.0, 1.0], &[n, n]).unwrap()
    }

    #[test]
    fn psi_delta_pieces() {
        assert_eq!(psi_delta(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(psi_delta(-3.0, 0.1).unwrap(), 0.1f64.ln());
        assert_eq!(psi_delta(0.0, 0.1).unwrap(), 0.1f64.ln());
        assert_eq!(psi_delta(1.0, 0.0).unwrap(), 0.0);
        assert!(matches!(psi_delta(0.0, 0.0), Err(InnerError::Domain(_))));
        assert!(matches!(psi_delta(-1.0, 0.0), Err(InnerError::Domain(_))));
        assert!(psi_delta(1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn psi_delta_is_monotone(a in -5.0f64..5.0, b in -5.0f64..5.0, delta in 1e-6f64..0.999) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(psi_delta(lo, delta).unwrap() <= psi_delta(hi, delta).unwrap());
        }
    }

    #[test]
    fn scalar_roots_match_bisection() {
        // rho + ln(rho + 0.5) = 2
        let g = line(3);
        let f = Field::constant(g.clone(), 2.0);
        let rho = solve_rho_regularized(&f, 1.0, 0.5, &NewtonConfig::default()).unwrap();
        let root = bisect(|s| s + (s + 0.5).ln() - 2.0, 0.0, 2.0);
        assert!((root - 1.372_647_040_416_647).abs() < 1e-12);
        assert!(rho.max_abs_diff(&Field::constant(g.clone(), root)) < 1e-12);

        // rho + ln rho = 2
        let rho = solve_rho(&f, 1.0, &DeltaSchedule::default(), &NewtonConfig::default()).unwrap();
        let root = bisect(|s| s + s.ln() - 2.0, 0.1, 2.0);
        assert!((root - 1.557_145_598_997_611).abs() < 1e-12);
        assert!(rho.max_abs_diff(&Field::constant(g, root)) < 1e-12);
    }

    #[test]
    fn constant_solution_of_the_regularized_equation() {
        let g = square(9);
        let tau = 0.3;
        let delta = 0.2;
        let f = Field::constant(g.clone(), 1.0 + tau * psi_delta(1.0, delta).unwrap());
        let rho = solve_rho_regularized(&f, tau, delta, &NewtonConfig::default()).unwrap();
        assert!(rho.values().iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn regularized_solution_can_go_nonpositive() {
        // f small enough that the flat branch s <= 0 is active
        let g = line(5);
        let (tau, delta) = (1.0, 0.1);
        let f = Field::constant(g, -4.0);
        let rho = solve_rho_regularized(&f, tau, delta, &NewtonConfig::default()).unwrap();
        let expect = -4.0 - tau * delta.ln();
        assert!(rho.values().iter().all(|r| (r - expect).abs() < 1e-12));
    }

    #[test]
    fn mean_identity_and_uniqueness_for_a_perturbed_density() {
        let g = square(17);
        let tau = 0.5;
        let cfg = NewtonConfig::default();
        let f = Field::from_fn(g.clone(), |x| {
            1.0 + 0.1 * (PI * x[0]).cos() * (PI * x[1]).cos()
        })
        .unwrap();
        let rho = solve_rho(&f, tau, &DeltaSchedule::default(), &cfg).unwrap();
        let eq = Field::new(
            g.clone(),
            rho.values()
                .iter()
                .zip(f.values())
                .map(|(r, fi)| r + tau * r.ln() - fi)
                .collect(),
        )
        .unwrap();
        assert!(integrate(&eq).abs() <= cfg.residual_tol * g.node_count() as f64);
        assert!(rho.min() > 0.8 && rho.max() < 1.2);

        // a very different start reaches the same solution
        let law = density_law(tau, 0.0);
        let guess = vec![5.0; g.node_count()];
        let (other, _) = newton_solve(&g, &law, f.values(), guess, &cfg).unwrap();
        let diff = crate::grid::max_abs_diff(&other, rho.values());
        assert!(diff <= 10.0 * cfg.residual_tol, "diff {diff}");
    }

    #[test]
    fn continuation_handles_rough_data() {
        let g = square(17);
        let cfg = NewtonConfig::default();
        // large negative right side pushes the density towards zero
        let f = Field::from_fn(g.clone(), |x| if x[0] < 0.5 { -3.0 } else { 4.0 }).unwrap();
        let rho = solve_rho(&f, 1.0, &DeltaSchedule::default(), &cfg).unwrap();
        assert!(rho.min() > 0.0);
        let lr = laplacian_neumann(&rho);
        for i in 0..rho.len() {
            let r = rho.values()[i];
            let res = -lr.values()[i] + r + r.ln() - f.values()[i];
            assert!(res.abs() <= cfg.residual_tol);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let g = line(5);
        let f = Field::constant(g, 1.0);
        let cfg = NewtonConfig::default();
        assert!(solve_rho_regularized(&f, 0.0, 0.1, &cfg).is_err());
        assert!(solve_rho_regularized(&f, 1.0, 0.0, &cfg).is_err());
        let bad = DeltaSchedule {
            delta_start: 1.5,
            ..DeltaSchedule::default()
        };
        assert!(solve_rho(&f, 1.0, &bad, &cfg).is_err());
        let bad = NewtonConfig {
            damping_min: 0.0,
            ..cfg
        };
        assert!(solve_rho(&f, 1.0, &DeltaSchedule::default(), &bad).is_err());
    }

    #[test]
    fn step_map_at_rest_and_for_constant_shifts() {
        let g = square(9);
        let cfg = NewtonConfig::default();
        let sched = DeltaSchedule::default();
        let zero = Field::zeros(g.clone());
        let out = step_map_b(&zero, &zero, 0.1, &sched, &cfg).unwrap();
        assert!(out.u.max_abs() < 1e-12);
        assert!(out.rho.values().iter().all(|r| (r - 1.0).abs() < 1e-12));

        // w - v = tau * c: density solves s + tau ln s = 1 - c
        let (tau, c) = (0.2, 0.4);
        let v = Field::constant(g.clone(), 0.3);
        let w = Field::constant(g.clone(), 0.3 + tau * c);
        let out = step_map_b(&w, &v, tau, &sched, &cfg).unwrap();
        let s = bisect(|s| s + tau * s.ln() - (1.0 - c), 1e-6, 2.0);
        assert!(out.rho.values().iter().all(|r| (r - s).abs() < 1e-11));
        let u = s.ln() / tau;
        assert!(out.u.values().iter().all(|x| (x - u).abs() < 1e-9));
    }

    #[test]
    fn step_map_composes_density_and_height_solves() {
        let g = square(9);
        let cfg = NewtonConfig::default();
        let sched = DeltaSchedule::default();
        let v = Field::from_fn(g.clone(), |x| 0.05 * (PI * x[0]).cos()).unwrap();
        let tau = 0.1;
        let out = step_map_b(&v, &v, tau, &sched, &cfg).unwrap();
        let rho = solve_rho(&Field::constant(g.clone(), 1.0), tau, &sched, &cfg).unwrap();
        let u =
            crate::elliptic::solve_helmholtz(tau, &rho.map(f64::ln).unwrap(), &cfg.linear).unwrap();
        assert!(out.rho.max_abs_diff(&rho) < 1e-12);
        assert!(out.u.max_abs_diff(&u) < 1e-10);
    }

    #[test]
    fn rest_state_is_an_exact_fixed_point() {
        let g = square(9);
        let res = solve_coupled_step(
            &Field::zeros(g),
            0.05,
            &DeltaSchedule::default(),
            &NewtonConfig::default(),
            &FixedPointConfig::default(),
        )
        .unwrap();
        assert_eq!(res.fixed_point_iters, 1);
        assert!(res.u.max_abs() < 1e-12);
        assert!(res.rho.values().iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    fn constant_step_oracle(c: f64, tau: f64) -> (f64, f64) {
        // rho = exp(tau u), (u - c)/tau + rho + tau ln rho = 1
        let g = |u: f64| (u - c) / tau + (tau * u).exp() + tau * tau * u - 1.0;
        let u = bisect(g, c - 10.0, c + 10.0);
        (u, (tau * u).exp())
    }

    #[test]
    fn constant_data_matches_the_scalar_system() {
        let g = square(9);
        let cfg = NewtonConfig::default();
        for (c, tau) in [(0.7, 0.05), (-1.2, 0.1), (3.0, 0.2)] {
            let res = solve_coupled_step(
                &Field::constant(g.clone(), c),
                tau,
                &DeltaSchedule::default(),
                &cfg,
                &FixedPointConfig::default(),
            )
            .unwrap();
            let (u, rho) = constant_step_oracle(c, tau);
            assert!(res.u.values().iter().all(|x| (x - u).abs() < 1e-9), "c={c}");
            assert!(res.rho.values().iter().all(|x| (x - rho).abs() < 1e-9));
            assert!(res.final_residuals.0 <= cfg.residual_tol);
            assert!(res.final_residuals.1 <= cfg.residual_tol);
        }
    }

    #[test]
    fn coupled_step_satisfies_both_equations() {
        let g = square(17);
        let cfg = NewtonConfig::default();
        let tau = 1.0 / 64.0;
        let v =
            Field::from_fn(g.clone(), |x| 0.05 * (PI * x[0]).cos() * (PI * x[1]).cos()).unwrap();
        let res = solve_coupled_step(
            &v,
            tau,
            &DeltaSchedule::default(),
            &cfg,
            &FixedPointConfig::default(),
        )
        .unwrap();
        let lr = laplacian_neumann(&res.rho);
        let lu = laplacian_neumann(&res.u);
        for i in 0..v.len() {
            let (u, r, up) = (res.u.values()[i], res.rho.values()[i], v.values()[i]);
            let gk = (u - up) / tau + r - 1.0;
            assert!((gk + tau * r.ln() - lr.values()[i]).abs() <= cfg.residual_tol);
            assert!((-lu.values()[i] + tau * u - r.ln()).abs() <= cfg.residual_tol);
        }
    }

    #[test]
    fn picard_converges_for_large_steps_only() {
        let g = square(9);
        let cfg = NewtonConfig::default();
        let v = Field::from_fn(g.clone(), |x| 0.02 * (PI * x[0]).cos()).unwrap();
        let picard = FixedPointConfig {
            method: FixedPointMethod::Picard,
            max_iters: 400,
            ..FixedPointConfig::default()
        };
        let big = solve_coupled_step(&v, 0.9, &DeltaSchedule::default(), &cfg, &picard).unwrap();
        let newton = solve_coupled_step(
            &v,
            0.9,
            &DeltaSchedule::default(),
            &cfg,
            &FixedPointConfig::default(),
        )
        .unwrap();
        assert!(big.u.max_abs_diff(&newton.u) < 1e-8);
        assert!(newton.fixed_point_iters < big.fixed_point_iters);

        let small = solve_coupled_step(&v, 0.01, &DeltaSchedule::default(), &cfg, &picard);
        assert!(matches!(
            small,
            Err(InnerError::FixedPointNonConvergence { .. })
        ));
    }

    #[test]
    fn positive_variant_fixed_point_at_one() {
        let g = square(9);
        let res = solve_positive_variant_step(
            &Field::constant(g, 1.0),
            0.1,
            &DeltaSchedule::default(),
            &NewtonConfig::default(),
            &FixedPointConfig::default(),
        )
        .unwrap();
        assert!(res.experimental);
        assert!(res.u.values().iter().all(|x| (x - 1.0).abs() < 1e-12));
        assert!(res.rho.values().iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn positive_variant_constant_data_matches_the_scalar_system() {
        let g = square(9);
        for (c, tau) in [(2.0, 0.1), (0.5, 0.05)] {
            let res = solve_positive_variant_step(
                &Field::constant(g.clone(), c),
                tau,
                &DeltaSchedule::default(),
                &NewtonConfig::default(),
                &FixedPointConfig::default(),
            )
            .unwrap();
            // rho = u^tau, (u - c)/tau + rho + tau ln rho = 1
            let h = |u: f64| (u - c) / tau + u.powf(tau) + tau * tau * u.ln() - 1.0;
            let u = bisect(h, 1e-3, 10.0);
            assert!(res.u.values().iter().all(|x| (x - u).abs() < 1e-9));
            assert!(res
                .rho
                .values()
                .iter()
                .all(|x| (x - u.powf(tau)).abs() < 1e-9));
            assert!(res.u.min() > 0.0 && res.rho.min() > 0.0);
        }
    }

    #[test]
    fn positive_variant_rejects_nonpositive_heights() {
        let g = line(5);
        let u = Field::new(g, vec![1.0, 0.5, -0.1, 1.0, 1.0]).unwrap();
        let res = solve_positive_variant_step(
            &u,
            0.1,
            &DeltaSchedule::default(),
            &NewtonConfig::default(),
            &FixedPointConfig::default(),
        );
        assert!(matches!(res, Err(InnerError::Precondition(_))));
    }
}
