//! Built-in initial data and the boundary-consistency report.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::grid::{Field, Grid, GridError};

pub type PointFn = Box<dyn Fn([f64; 3]) -> f64>;

/// One term `a * prod_i cos(m_i pi x_i / extent_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMode {
    pub modes: Vec<usize>,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    Zero,
    Constant(f64),
    Cosine(Vec<CosineMode>),
    /// Arithmetic over `x`, `y`, `z` with the usual functions and `pi`, `e`.
    Expr(String),
}

impl InitialCondition {
    /// `"m1 [m2 [m3]] a; ..."`, one integer per axis then the amplitude.
    pub fn parse_modes(text: &str, dim: usize) -> Result<Self, String> {
        let mut terms = Vec::new();
        for term in text.split(';') {
            let tokens: Vec<&str> = term.split_whitespace().collect();
            if tokens.is_empty() {
                continue;
            }
            if tokens.len() != dim + 1 {
                return Err(format!(
                    "ic.modes term {term:?} needs {dim} mode integers and an amplitude"
                ));
            }
            let modes = tokens[..dim]
                .iter()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| format!("ic.modes: bad mode {t:?}"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let amplitude: f64 = tokens[dim]
                .parse()
                .map_err(|_| format!("ic.modes: bad amplitude {:?}", tokens[dim]))?;
            if !amplitude.is_finite() {
                return Err("ic.modes: amplitude must be finite".into());
            }
            terms.push(CosineMode { modes, amplitude });
        }
        if terms.is_empty() {
            return Err("ic.modes is empty".into());
        }
        Ok(Self::Cosine(terms))
    }

    pub fn parse_expr(text: &str) -> Result<Self, String> {
        let text = text.trim();
        let expr = meval::Expr::from_str(text).map_err(|e| format!("ic.expr: {e}"))?;
        expr.bind3("x", "y", "z")
            .map(|_| ())
            .map_err(|e| format!("ic.expr: {e}"))?;
        Ok(Self::Expr(text.to_string()))
    }

    pub fn modes_text(&self) -> String {
        match self {
            Self::Cosine(terms) => terms
                .iter()
                .map(|t| {
                    let mut parts: Vec<String> = t.modes.iter().map(|m| m.to_string()).collect();
                    parts.push(format!("{:e}", t.amplitude));
                    parts.join(" ")
                })
                .collect::<Vec<_>>()
                .join("; "),
            _ => String::new(),
        }
    }

    /// Pointwise evaluator in physical coordinates for the given box.
    pub fn evaluator(&self, extents: &[f64]) -> Result<PointFn, String> {
        Ok(match self {
            Self::Zero => Box::new(|_| 0.0),
            Self::Constant(c) => {
                let c = *c;
                Box::new(move |_| c)
            }
            Self::Cosine(terms) => {
                if terms.iter().any(|t| t.modes.len() != extents.len()) {
                    return Err("cosine mode arity does not match the grid dimension".into());
                }
                let terms = terms.clone();
                let extents = extents.to_vec();
                Box::new(move |x| {
                    terms
                        .iter()
                        .map(|t| {
                            t.modes
                                .iter()
                                .zip(&extents)
                                .enumerate()
                                .map(|(i, (&m, &l))| (m as f64 * PI * x[i] / l).cos())
                                .product::<f64>()
                                * t.amplitude
                        })
                        .sum()
                })
            }
            Self::Expr(text) => {
                let expr = meval::Expr::from_str(text).map_err(|e| e.to_string())?;
                let f = expr.bind3("x", "y", "z").map_err(|e| e.to_string())?;
                Box::new(move |x| f(x[0], x[1], x[2]))
            }
        })
    }

    pub fn build(&self, grid: &std::sync::Arc<Grid>) -> Result<Field, IcError> {
        let f = self.evaluator(grid.extents()).map_err(IcError::Expr)?;
        Ok(Field::from_fn(grid.clone(), f)?)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IcError {
    #[error("{0}")]
    Expr(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Mirror defect of the data and of `exp(-Lap u0)` one node outside each face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFluxReport {
    pub u0_defect: f64,
    pub density_defect: f64,
    pub warn: bool,
}

pub const BOUNDARY_FLUX_WARN: f64 = 1e-8;

/// Evaluates the data on the grid padded by two layers, applies the plain
/// stencil one layer out, and compares each ghost value with its mirror
/// image across the face. Zero defect means the reflection used by the
/// Neumann stencil agrees with the data's own extension.
pub fn boundary_flux_report(
    ic: &InitialCondition,
    grid: &Grid,
) -> Result<BoundaryFluxReport, String> {
    let f = ic.evaluator(grid.extents())?;
    let dim = grid.dim();
    let n: Vec<usize> = grid.nodes().to_vec();
    let h: Vec<f64> = grid.spacing().to_vec();
    const PAD: usize = 2;
    let ext: Vec<usize> = n.iter().map(|&m| m + 2 * PAD).collect();
    let total: usize = ext.iter().product();
    let strides: Vec<usize> = (0..dim).map(|a| ext[a + 1..].iter().product()).collect();
    let unpack = |mut idx: usize| {
        let mut m = [0usize; 3];
        for a in 0..dim {
            m[a] = idx / strides[a];
            idx %= strides[a];
        }
        m
    };
    let mut u = vec![0.0; total];
    for (idx, slot) in u.iter_mut().enumerate() {
        let m = unpack(idx);
        let mut x = [0.0; 3];
        for a in 0..dim {
            x[a] = (m[a] as f64 - PAD as f64) * h[a];
        }
        *slot = f(x);
    }
    // exp(-Lap u) wherever all neighbours exist
    let mut rho = vec![f64::NAN; total];
    for (idx, slot) in rho.iter_mut().enumerate() {
        let m = unpack(idx);
        if (0..dim).any(|a| m[a] == 0 || m[a] == ext[a] - 1) {
            continue;
        }
        let mut lap = 0.0;
        for a in 0..dim {
            lap += (u[idx + strides[a]] - 2.0 * u[idx] + u[idx - strides[a]]) / (h[a] * h[a]);
        }
        *slot = (-lap).exp();
    }
    let mut du: f64 = 0.0;
    let mut dr: f64 = 0.0;
    for idx in 0..total {
        let m = unpack(idx);
        // tangential indices must lie inside the original box
        for a in 0..dim {
            let inside = (0..dim)
                .filter(|&b| b != a)
                .all(|b| m[b] >= PAD && m[b] < PAD + n[b]);
            if !inside {
                continue;
            }
            let mirror = if m[a] == PAD - 1 {
                idx + 2 * strides[a]
            } else if m[a] == PAD + n[a] {
                idx - 2 * strides[a]
            } else {
                continue;
            };
            du = du.max((u[idx] - u[mirror]).abs());
            let d = (rho[idx] - rho[mirror]).abs();
            dr = if d.is_nan() { f64::INFINITY } else { dr.max(d) };
        }
    }
    Ok(BoundaryFluxReport {
        u0_defect: du,
        density_defect: dr,
        warn: !(du <= BOUNDARY_FLUX_WARN && dr <= BOUNDARY_FLUX_WARN),
    })
}
