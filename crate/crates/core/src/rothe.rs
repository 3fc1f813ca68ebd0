//! The implicit time loop over `[0, T]` and the time interpolants of the
//! resulting slice sequence.

use thiserror::Error;

use crate::estimates::{diagnostics_record, DiagnosticsRecord, EstimateError};
use crate::grid::{dirichlet_energy, integrate, laplacian_neumann, Field, GridError};
use crate::inner::{
    coupled_step, DeltaSchedule, FixedPointConfig, HeightEquation, InnerError, NewtonConfig,
};

/// One time level.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub k: usize,
    pub t: f64,
    pub tau: f64,
    pub u: Field,
    pub rho: Field,
    /// `(u_k - u_{k-1})/tau + rho_k - 1`; at `k = 0` it is `L rho_0 - tau ln rho_0`.
    pub g: Field,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub t_final: f64,
    pub steps: usize,
    pub newton: NewtonConfig,
    pub schedule: DeltaSchedule,
    pub fixed_point: FixedPointConfig,
    /// Record diagnostics every this many steps; zero disables them.
    pub diagnostics_every: usize,
    pub override_tau_gate: bool,
    pub height: HeightEquation,
    /// Inequality slack is `slack_factor * residual_tol * node_count`.
    pub slack_factor: f64,
}

impl RunConfig {
    pub fn new(t_final: f64, steps: usize) -> Self {
        Self {
            t_final,
            steps,
            newton: NewtonConfig::default(),
            schedule: DeltaSchedule::default(),
            fixed_point: FixedPointConfig::default(),
            diagnostics_every: 1,
            override_tau_gate: false,
            height: HeightEquation::Helmholtz,
            slack_factor: 100.0,
        }
    }

    pub fn tau(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn slack(&self, node_count: usize) -> f64 {
        self.slack_factor * self.newton.residual_tol * node_count as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Completed,
    Aborted { step: usize, error: InnerError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `k = 0`: `u_0`, `rho_0` and `G_0`.
    pub initial: StepState,
    pub steps: Vec<StepState>,
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub config: RunConfig,
    pub tau_report: TauReport,
    pub termination: Termination,
}

impl Trajectory {
    /// Initial slice followed by all computed steps.
    pub fn slices(&self) -> impl Iterator<Item = &StepState> {
        std::iter::once(&self.initial).chain(self.steps.iter())
    }

    pub fn slice(&self, k: usize) -> Option<&StepState> {
        if k == 0 {
            Some(&self.initial)
        } else {
            self.steps.get(k - 1)
        }
    }

    pub fn last(&self) -> &StepState {
        self.steps.last().unwrap_or(&self.initial)
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.termination, Termination::Completed)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "step size {} violates the gate tau < {} (limits 1, 1/|u0|_W22 = {}, 1/(8T) = {})",
        .0.tau, .0.bound, .0.inverse_norm, .0.inverse_eight_t
    )]
    TauGate(TauReport),
    #[error(
        "initial data too rough: exponent {exponent:.6e} at node {index} leaves the range of exp"
    )]
    DataTooRough { index: usize, exponent: f64 },
    #[error("{0}")]
    Inner(#[from] InnerError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// `(integral u^2 + dirichlet_energy(u) + integral (L u)^2)^(1/2)`, standing in
/// for the full second-order Sobolev norm.
pub fn w22_surrogate(u: &Field) -> f64 {
    let lap = laplacian_neumann(u);
    let sq = |f: &Field| {
        f.values()
            .iter()
            .zip(f.grid().weights())
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
    };
    (sq(u) + dirichlet_energy(u) + sq(&lap)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauReport {
    pub tau: f64,
    pub surrogate_norm: f64,
    pub inverse_norm: f64,
    pub inverse_eight_t: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `tau = T/j` against `min{1, 1/|u0|_W22, 1/(8T)}`.
pub fn check_tau_constraint(u0: &Field, t_final: f64, steps: usize) -> TauReport {
    let tau = t_final / steps as f64;
    let norm = w22_surrogate(u0);
    let inverse_norm = if norm > 0.0 {
        1.0 / norm
    } else {
        f64::INFINITY
    };
    let inverse_eight_t = 1.0 / (8.0 * t_final);
    let bound = 1f64.min(inverse_norm).min(inverse_eight_t);
    TauReport {
        tau,
        surrogate_norm: norm,
        inverse_norm,
        inverse_eight_t,
        bound,
        pass: tau < bound,
    }
}

/// `rho_0 = exp(-L u0 + tau u0)`.
pub fn init_rho0(u0: &Field, tau: f64) -> Result<Field, RunError> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(RunError::InvalidConfig(format!(
            "tau must be nonnegative, got {tau}"
        )));
    }
    let lap = laplacian_neumann(u0);
    let mut out = Vec::with_capacity(u0.len());
    for (index, (l, u)) in lap.values().iter().zip(u0.values()).enumerate() {
        let exponent = -l + tau * u;
        let r = exponent.exp();
        if !(r.is_finite() && r > 0.0) {
            return Err(RunError::DataTooRough { index, exponent });
        }
        out.push(r);
    }
    Ok(Field::new(u0.grid().clone(), out)?)
}

/// `G_0 = L rho_0 - tau ln rho_0`.
pub fn initial_g(rho0: &Field, tau: f64) -> Result<Field, RunError> {
    let lap = laplacian_neumann(rho0);
    Ok(lap.zip_map(rho0, |l, r| l - tau * r.ln())?)
}

fn assemble_g(u: &Field, u_prev: &Field, rho: &Field, tau: f64) -> Result<Field, GridError> {
    let vals = u
        .values()
        .iter()
        .zip(u_prev.values())
        .zip(rho.values())
        .map(|((a, b), r)| (a - b) / tau + r - 1.0)
        .collect();
    Field::new(u.grid().clone(), vals)
}

fn validate(cfg: &RunConfig) -> Result<(), RunError> {
    if !(cfg.t_final > 0.0 && cfg.t_final.is_finite()) {
        return Err(RunError::InvalidConfig(format!(
            "T must be positive, got {}",
            cfg.t_final
        )));
    }
    if cfg.steps == 0 {
        return Err(RunError::InvalidConfig("j must be at least 1".into()));
    }
    if !(cfg.slack_factor >= 0.0) {
        return Err(RunError::InvalidConfig(
            "slack factor must be nonnegative".into(),
        ));
    }
    cfg.newton.validate()?;
    cfg.schedule.validate()?;
    Ok(())
}

/// Marches `cfg.steps` implicit steps from `u0`.
///
/// Inner failures do not produce an error: the trajectory up to the failing
/// step comes back with `Termination::Aborted`.
pub fn run(u0: &Field, cfg: &RunConfig) -> Result<Trajectory, RunError> {
    validate(cfg)?;
    let tau = cfg.tau();
    let tau_report = check_tau_constraint(u0, cfg.t_final, cfg.steps);
    if !tau_report.pass && !cfg.override_tau_gate {
        return Err(RunError::TauGate(tau_report));
    }
    if cfg.height == HeightEquation::LogPositive && u0.values().iter().any(|&x| !(x > 0.0)) {
        return Err(RunError::InvalidConfig(
            "the positive-height variant needs u0 > 0 everywhere".into(),
        ));
    }
    let rho0 = init_rho0(u0, tau)?;
    let g0 = initial_g(&rho0, tau)?;
    let initial = StepState {
        k: 0,
        t: 0.0,
        tau,
        u: u0.clone(),
        rho: rho0,
        g: g0,
    };
    let slack = cfg.slack(u0.len());
    let mut traj = Trajectory {
        initial,
        steps: Vec::with_capacity(cfg.steps),
        diagnostics: Vec::new(),
        config: cfg.clone(),
        tau_report,
        termination: Termination::Completed,
    };
    for k in 1..=cfg.steps {
        let prev = traj.last();
        let step = coupled_step(
            &prev.u,
            tau,
            &cfg.schedule,
            &cfg.newton,
            &cfg.fixed_point,
            cfg.height,
        );
        let res = match step {
            Ok(r) => r,
            Err(error) => {
                traj.termination = Termination::Aborted { step: k, error };
                return Ok(traj);
            }
        };
        let g = assemble_g(&res.u, &prev.u, &res.rho, tau)?;
        let state = StepState {
            k,
            t: k as f64 * tau,
            tau,
            u: res.u,
            rho: res.rho,
            g,
        };
        if cfg.diagnostics_every > 0 && k % cfg.diagnostics_every == 0 {
            let rec =
                diagnostics_record(prev, &state, slack, res.fixed_point_iters, res.newton_iters)?;
            traj.diagnostics.push(rec);
        }
        traj.steps.push(state);
    }
    Ok(traj)
}

/// Largest of `|tau G_k - (u_k - u_{k-1}) - tau (rho_k - 1)|` over nodes and steps.
pub fn reconstruction_defect(traj: &Trajectory) -> f64 {
    let mut worst = 0.0f64;
    for k in 1..=traj.steps.len() {
        let (p, s) = (&traj.slice(k - 1).unwrap(), &traj.slice(k).unwrap());
        for i in 0..s.u.len() {
            let d = s.tau * s.g.values()[i]
                - (s.u.values()[i] - p.u.values()[i])
                - s.tau * (s.rho.values()[i] - 1.0);
            worst = worst.max(d.abs());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interpolants {
    pub u_tilde: Field,
    pub u_bar: Field,
    pub rho_tilde: Field,
    pub rho_bar: Field,
    pub sigma_tilde: Field,
    pub g_bar: Field,
}

/// Time interpolants at `t` in `(0, T]`: on `(t_{k-1}, t_k]` the tilde
/// variants are linear with weight `(t - t_{k-1})/tau` on slice `k`, the bar
/// variants equal slice `k`.
pub fn evaluate_interpolants(traj: &Trajectory, t: f64) -> Result<Interpolants, RunError> {
    let tau = traj.initial.tau;
    let n = traj.steps.len();
    let t_end = n as f64 * tau;
    if !(t > 0.0 && t <= t_end) {
        return Err(RunError::InvalidConfig(format!(
            "t = {t} lies outside (0, {t_end}] covered by the trajectory"
        )));
    }
    let mut k = ((t / tau).ceil() as usize).clamp(1, n);
    if k > 1 && t <= (k - 1) as f64 * tau {
        k -= 1;
    }
    if k < n && t > k as f64 * tau {
        k += 1;
    }
    let theta = if t == k as f64 * tau {
        1.0
    } else {
        (t - (k - 1) as f64 * tau) / tau
    };
    let prev = traj.slice(k - 1).unwrap();
    let cur = traj.slice(k).unwrap();
    let lerp = |a: &Field, b: &Field| a.zip_map(b, |x, y| (1.0 - theta) * x + theta * y);
    let sqrt_prev = prev.rho.map(f64::sqrt)?;
    let sqrt_cur = cur.rho.map(f64::sqrt)?;
    Ok(Interpolants {
        u_tilde: lerp(&prev.u, &cur.u)?,
        u_bar: cur.u.clone(),
        rho_tilde: lerp(&prev.rho, &cur.rho)?,
        rho_bar: cur.rho.clone(),
        sigma_tilde: lerp(&sqrt_prev, &sqrt_cur)?,
        g_bar: cur.g.clone(),
    })
}

/// Space-time integrals `(int (rho_tilde - rho_bar)^2, tau^2 int (d/dt rho_tilde)^2)`,
/// evaluated exactly slice by slice.
pub fn interpolant_gap(traj: &Trajectory) -> (f64, f64) {
    let tau = traj.initial.tau;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for k in 1..=traj.steps.len() {
        let (p, s) = (traj.slice(k - 1).unwrap(), traj.slice(k).unwrap());
        let d = s.rho.zip_map(&p.rho, |a, b| (a - b) * (a - b)).unwrap();
        let sq = integrate(&d);
        // (1 - theta)^2 integrated over one step, and tau^2 (d/tau)^2 over one step
        lhs += tau / 3.0 * sq;
        rhs += tau * tau * tau * sq / (tau * tau);
    }
    (lhs, rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use std::f64::consts::PI;

    fn cosine_1d(n: usize, a: f64) -> Field {
        let g = build_grid(1, &[1.0], &[n]).unwrap();
        Field::from_fn(g, |x| a * (PI * x[0]).cos()).unwrap()
    }

    #[test]
    fn tau_gate_examples() {
        let g = build_grid(2, &[1.0, 1.0], &[5, 5]).unwrap();
        let zero = Field::zeros(g);
        let r = check_tau_constraint(&zero, 1.0, 16);
        assert!(r.pass);
        assert_eq!(r.bound, 0.125);
        assert!(!check_tau_constraint(&zero, 1.0, 4).pass);
    }

    #[test]
    fn tau_gate_with_a_measured_norm() {
        // scale a cosine so that its surrogate norm is exactly 10
        let base = cosine_1d(33, 1.0);
        let a = 10.0 / w22_surrogate(&base);
        let u = base.map(|x| a * x).unwrap();
        assert!((w22_surrogate(&u) - 10.0).abs() < 1e-12);
        let r = check_tau_constraint(&u, 0.1, 2);
        assert!((r.bound - 0.1).abs() < 1e-12);
        assert!(r.pass);
        assert!(!check_tau_constraint(&u, 0.1, 1).pass);
    }

    #[test]
    fn initial_density() {
        let g = build_grid(1, &[1.0], &[9]).unwrap();
        let r = init_rho0(&Field::zeros(g.clone()), 0.3).unwrap();
        assert!(r.values().iter().all(|&x| x == 1.0));
        let r = init_rho0(&Field::constant(g.clone(), 2.0), 0.3).unwrap();
        assert!(r.values().iter().all(|&x| (x - 0.6f64.exp()).abs() < 1e-15));

        let u = cosine_1d(17, 0.2);
        let h = u.grid().spacing()[0];
        let lam = crate::grid::neumann_eigenvalue(1, 1.0, h);
        let r = init_rho0(&u, 0.0).unwrap();
        for (i, v) in r.values().iter().enumerate() {
            let x = i as f64 * h;
            assert!((v - (0.2 * lam * (PI * x).cos()).exp()).abs() < 1e-13);
        }

        let rough = cosine_1d(65, 1e3);
        assert!(matches!(
            init_rho0(&rough, 0.0),
            Err(RunError::DataTooRough { .. })
        ));
    }

    #[test]
    fn refuses_to_start_on_the_gate() {
        let u = cosine_1d(9, 0.0);
        let cfg = RunConfig::new(1.0, 4);
        assert!(matches!(run(&u, &cfg), Err(RunError::TauGate(_))));
        let cfg = RunConfig {
            override_tau_gate: true,
            ..cfg
        };
        assert!(run(&u, &cfg).unwrap().is_complete());
    }

    #[test]
    fn rest_state_stays_at_rest() {
        let g = build_grid(2, &[1.0, 1.0], &[9, 9]).unwrap();
        let cfg = RunConfig::new(0.5, 16);
        let traj = run(&Field::zeros(g), &cfg).unwrap();
        assert!(traj.is_complete());
        assert_eq!(traj.steps.len(), 16);
        let tol = 10.0 * cfg.newton.residual_tol;
        for s in &traj.steps {
            assert!(s.u.max_abs() <= tol);
            assert!(s.rho.values().iter().all(|r| (r - 1.0).abs() <= tol));
            assert!(s.g.max_abs() <= tol / cfg.tau());
        }
        assert_eq!(traj.diagnostics.len(), 16);
        assert_eq!(traj.initial.g.max_abs(), 0.0);
    }

    #[test]
    fn times_are_exact_multiples() {
        let u = cosine_1d(17, 0.02);
        let traj = run(&u, &RunConfig::new(0.25, 8)).unwrap();
        for (i, s) in traj.slices().enumerate() {
            assert_eq!(s.k, i);
            assert_eq!(s.t, i as f64 * traj.initial.tau);
        }
    }

    #[test]
    fn g_is_assembled_from_the_slices() {
        let u = cosine_1d(17, 0.05);
        let traj = run(&u, &RunConfig::new(0.25, 8)).unwrap();
        for k in 1..=8 {
            let (p, s) = (traj.slice(k - 1).unwrap(), traj.slice(k).unwrap());
            let again = assemble_g(&s.u, &p.u, &s.rho, s.tau).unwrap();
            assert_eq!(again, s.g);
        }
        let scale = traj
            .slices()
            .map(|s| s.u.max_abs() + s.rho.max_abs())
            .fold(0.0, f64::max);
        assert!(reconstruction_defect(&traj) <= 4.0 * f64::EPSILON * scale);
    }

    #[test]
    fn interpolants_at_grid_times_and_midpoints() {
        let u = cosine_1d(17, 0.05);
        let traj = run(&u, &RunConfig::new(0.25, 8)).unwrap();
        let tau = traj.initial.tau;
        for k in 1..=8 {
            let it = evaluate_interpolants(&traj, k as f64 * tau).unwrap();
            let s = traj.slice(k).unwrap();
            assert_eq!(it.u_tilde, s.u);
            assert_eq!(it.u_bar, s.u);
            assert_eq!(it.rho_tilde, s.rho);
            assert_eq!(it.rho_bar, s.rho);
            assert_eq!(it.g_bar, s.g);

            let p = traj.slice(k - 1).unwrap();
            let mid = evaluate_interpolants(&traj, (k as f64 - 0.5) * tau).unwrap();
            let half = p.u.zip_map(&s.u, |a, b| (a + b) / 2.0).unwrap();
            assert!(mid.u_tilde.max_abs_diff(&half) <= 1e-16);
            let sig = p
                .rho
                .zip_map(&s.rho, |a, b| (a.sqrt() + b.sqrt()) / 2.0)
                .unwrap();
            assert!(mid.sigma_tilde.max_abs_diff(&sig) <= 1e-15);
            let gap = mid.rho_tilde.zip_map(&mid.rho_bar, |a, b| a - b).unwrap();
            let expect = p.rho.zip_map(&s.rho, |a, b| (a - b) / 2.0).unwrap();
            assert!(gap.max_abs_diff(&expect) <= 1e-15);
        }
        assert!(evaluate_interpolants(&traj, 0.0).is_err());
        assert!(evaluate_interpolants(&traj, 0.3).is_err());
    }

    #[test]
    fn interpolant_gap_is_bounded() {
        let u = cosine_1d(17, 0.05);
        let traj = run(&u, &RunConfig::new(0.25, 8)).unwrap();
        let (lhs, rhs) = interpolant_gap(&traj);
        assert!(lhs > 0.0 && lhs <= rhs);
    }

    #[test]
    fn time_refinement_is_first_order() {
        let u = cosine_1d(33, 0.05);
        let finals: Vec<Field> = [16, 32, 64]
            .iter()
            .map(|&j| run(&u, &RunConfig::new(0.1, j)).unwrap().last().u.clone())
            .collect();
        let d1 = finals[0].max_abs_diff(&finals[1]);
        let d2 = finals[1].max_abs_diff(&finals[2]);
        let ratio = d1 / d2;
        assert!((1.5..=3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn huge_data_aborts_with_partial_trajectory() {
        let u = cosine_1d(33, 3.0);
        let cfg = RunConfig {
            override_tau_gate: true,
            ..RunConfig::new(1.0, 64)
        };
        let traj = run(&u, &cfg).unwrap();
        let Termination::Aborted { step, .. } = &traj.termination else {
            panic!("expected an abort, got {:?}", traj.termination);
        };
        assert_eq!(traj.steps.len(), step - 1);
        assert!(!traj.is_complete());
    }
}
