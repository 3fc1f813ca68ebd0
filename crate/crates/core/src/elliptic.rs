//! Linear solves of `(-L_h + alpha) v = f` with Neumann boundary conditions.
//!
//! The mirror-stencil Laplacian is self-adjoint in the quadrature-weighted
//! inner product, not the Euclidean one, so conjugate gradients run in that
//! inner product. Shifts may vary per node (Newton Jacobians carry a diagonal
//! term), and the preconditioner is the stencil diagonal.

use thiserror::Error;

use crate::grid::{norm2, Field, Grid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("shift must be positive at every node (got {value} at node {index})")]
    NonPositiveShift { index: usize, value: f64 },
    #[error("linear solver did not converge: relative residual {relative_residual:.3e} after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        relative_residual: f64,
    },
    #[error("invalid linear solver configuration: {0}")]
    InvalidConfig(String),
    #[error("right-hand side has a non-finite entry")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSolveConfig {
    /// Relative Euclidean residual target.
    pub tolerance: f64,
    /// Defaults to ten times the node count.
    pub max_iterations: Option<usize>,
}

impl Default for LinearSolveConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-11,
            max_iterations: None,
        }
    }
}

impl LinearSolveConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-3) {
            return Err(SolveError::InvalidConfig(format!(
                "tolerance must lie in (0, 1e-3], got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == Some(0) {
            return Err(SolveError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn budget(&self, n: usize) -> usize {
        self.max_iterations.unwrap_or(10 * n)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinearSolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// `out = (-L_h + diag(shift)) x`.
pub fn apply_shifted(grid: &Grid, shift: &[f64], x: &[f64], out: &mut [f64]) {
    grid.apply_laplacian(x, out);
    for ((o, &s), &xi) in out.iter_mut().zip(shift).zip(x) {
        *o = s * xi - *o;
    }
}

/// Solves `(-L_h + alpha) v = f`.
pub fn solve_helmholtz(
    alpha: f64,
    f: &Field,
    cfg: &LinearSolveConfig,
) -> Result<Field, SolveError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SolveError::NonPositiveShift {
            index: 0,
            value: alpha,
        });
    }
    let shift = vec![alpha; f.len()];
    solve_shifted(&shift, f, None, cfg).map(|(v, _)| v)
}

/// Solves `(-L_h + diag(shift)) v = f` by preconditioned conjugate gradients,
/// optionally warm-started from `x0`.
pub fn solve_shifted(
    shift: &[f64],
    f: &Field,
    x0: Option<&[f64]>,
    cfg: &LinearSolveConfig,
) -> Result<(Field, LinearSolveStats), SolveError> {
    cfg.validate()?;
    if let Some((index, &value)) = shift
        .iter()
        .enumerate()
        .find(|(_, s)| !(**s > 0.0 && s.is_finite()))
    {
        return Err(SolveError::NonPositiveShift { index, value });
    }
    if f.values().iter().any(|v| !v.is_finite()) {
        return Err(SolveError::NonFinite);
    }
    let grid = f.grid().clone();
    let (x, stats) = pcg(&grid, shift, f.values(), x0, cfg)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::NonFinite);
    }
    Ok((Field::from_vec_unchecked(grid, x), stats))
}

fn pcg(
    grid: &Grid,
    shift: &[f64],
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &LinearSolveConfig,
) -> Result<(Vec<f64>, LinearSolveStats), SolveError> {
    let n = b.len();
    let b_norm = norm2(b);
    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    if b_norm == 0.0 {
        return Ok((
            vec![0.0; n],
            LinearSolveStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let target = cfg.tolerance * b_norm;
    let budget = cfg.budget(n);

    let stencil = grid.stencil_diagonal();
    let inv_diag: Vec<f64> = shift.iter().map(|s| 1.0 / (s + stencil)).collect();

    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];

    let mut iterations = 0;
    let mut best = f64::INFINITY;
    let mut stalls = 0;
    loop {
        // (re)start from the true residual
        apply_shifted(grid, shift, &x, &mut q);
        for i in 0..n {
            r[i] = b[i] - q[i];
        }
        let true_norm = norm2(&r);
        if true_norm <= target {
            return Ok((
                x,
                LinearSolveStats {
                    iterations,
                    relative_residual: true_norm / b_norm,
                },
            ));
        }
        if true_norm < 0.5 * best {
            best = true_norm;
            stalls = 0;
        } else {
            stalls += 1;
        }
        if stalls > 3 {
            // the recursion cannot push the true residual below what rounding
            // in the operator itself produces; accept a stall at that level
            let op_norm = shift.iter().fold(0.0f64, |m, s| m.max(*s)) + 2.0 * stencil;
            let floor = 64.0 * f64::EPSILON * op_norm * norm2(&x);
            if true_norm <= floor {
                return Ok((
                    x,
                    LinearSolveStats {
                        iterations,
                        relative_residual: true_norm / b_norm,
                    },
                ));
            }
        }
        if iterations >= budget || stalls > 3 {
            return Err(SolveError::NonConvergence {
                iterations,
                relative_residual: true_norm / b_norm,
            });
        }

        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        p.copy_from_slice(&z);
        let mut rz = grid.dot(&r, &z);
        while iterations < budget {
            apply_shifted(grid, shift, &p, &mut q);
            let pq = grid.dot(&p, &q);
            if !(pq > 0.0) {
                break;
            }
            let alpha = rz / pq;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            iterations += 1;
            if norm2(&r) <= target {
                break;
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new = grid.dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum GmresError<E> {
    Operator(E),
    NonConvergence {
        iterations: usize,
        relative_residual: f64,
    },
}

/// Restarted GMRES in the quadrature-weighted inner product. Returns the
/// solution and the number of operator applications.
pub(crate) fn gmres<E>(
    grid: &Grid,
    mut apply: impl FnMut(&[f64], &mut [f64]) -> Result<(), E>,
    b: &[f64],
    restart: usize,
    tolerance: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, usize), GmresError<E>> {
    let n = b.len();
    let wnorm = |v: &[f64]| grid.dot(v, v).sqrt();
    let b_norm = wnorm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((x, 0));
    }
    let m = restart.max(1);
    let mut iterations = 0;
    let mut ax = vec![0.0; n];
    let mut rel = 1.0;
    while iterations < max_iterations {
        apply(&x, &mut ax).map_err(GmresError::Operator)?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = wnorm(&r);
        rel = beta / b_norm;
        if rel <= tolerance {
            return Ok((x, iterations));
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        // Hessenberg columns, Givens rotations and the rotated residual vector
        let mut hess: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut cs: Vec<f64> = Vec::with_capacity(m);
        let mut sn: Vec<f64> = Vec::with_capacity(m);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut used = 0;
        for j in 0..m {
            if iterations >= max_iterations {
                break;
            }
            let mut w = vec![0.0; n];
            apply(&basis[j], &mut w).map_err(GmresError::Operator)?;
            iterations += 1;
            let mut h = vec![0.0; j + 2];
            for (i, v) in basis.iter().enumerate() {
                let hij = grid.dot(&w, v);
                h[i] = hij;
                for (wk, vk) in w.iter_mut().zip(v) {
                    *wk -= hij * vk;
                }
            }
            let h_next = wnorm(&w);
            h[j + 1] = h_next;
            for i in 0..j {
                let t = cs[i] * h[i] + sn[i] * h[i + 1];
                h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1];
                h[i] = t;
            }
            let denom = h[j].hypot(h[j + 1]);
            let (c, s) = if denom == 0.0 {
                (1.0, 0.0)
            } else {
                (h[j] / denom, h[j + 1] / denom)
            };
            h[j] = denom;
            h[j + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            g[j + 1] = -s * g[j];
            g[j] *= c;
            hess.push(h);
            used = j + 1;
            rel = g[j + 1].abs() / b_norm;
            if rel <= tolerance || h_next == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / h_next).collect());
        }
        // back substitution on the triangular system
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let mut acc = g[i];
            for k in i + 1..used {
                acc -= hess[k][i] * y[k];
            }
            y[i] = acc / hess[i][i];
        }
        for (k, yk) in y.iter().enumerate() {
            for (xi, vi) in x.iter_mut().zip(&basis[k]) {
                *xi += yk * vi;
            }
        }
        if rel <= tolerance {
            return Ok((x, iterations));
        }
    }
    Err(GmresError::NonConvergence {
        iterations,
        relative_residual: rel,
    })
}
