//! Box grids, nodal fields and the mirror-stencil Neumann calculus.
//!
//! Nodes sit at `x_i = i * h` on every axis, boundary nodes included. The
//! Laplacian uses a mirror ghost node (`u_{-1} = u_1`) on each face, and the
//! quadrature is the tensor trapezoidal rule. With these two choices the
//! quadrature weights are exactly the mass that makes the Laplacian
//! self-adjoint, so
//!
//! ```text
//! integrate(L a * b) = integrate(a * L b) = -<grad a, grad b>_h
//! ```
//!
//! holds up to rounding. Every energy identity checked downstream relies on it.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension must be 1, 2 or 3 (got {0})")]
    Dimension(usize),
    #[error("expected {expected} per-axis entries, got {got}")]
    AxisCount { expected: usize, got: usize },
    #[error("axis {axis}: at least 3 nodes required (got {nodes})")]
    TooFewNodes { axis: usize, nodes: usize },
    #[error("axis {axis}: extent must be positive and finite (got {extent})")]
    Extent { axis: usize, extent: f64 },
    #[error("field has {got} values but the grid has {expected} nodes")]
    Length { expected: usize, got: usize },
    #[error("non-finite value at node {index}")]
    NonFinite { index: usize },
    #[error("fields live on different grids")]
    GridMismatch,
}

/// Uniform axis-aligned box grid `[0, extent_0] x ... x [0, extent_{d-1}]`.
#[derive(Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    extents: Vec<f64>,
    nodes: Vec<usize>,
    spacing: Vec<f64>,
    // padded to three axes, absent axes have a single node
    shape: [usize; 3],
    strides: [usize; 3],
    weights: Vec<f64>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.dim)
            .field("extents", &self.extents)
            .field("nodes", &self.nodes)
            .field("spacing", &self.spacing)
            .finish()
    }
}

impl Grid {
    pub fn new(dim: usize, extents: &[f64], nodes: &[usize]) -> Result<Self, GridError> {
        if !(1..=3).contains(&dim) {
            return Err(GridError::Dimension(dim));
        }
        if extents.len() != dim {
            return Err(GridError::AxisCount {
                expected: dim,
                got: extents.len(),
            });
        }
        if nodes.len() != dim {
            return Err(GridError::AxisCount {
                expected: dim,
                got: nodes.len(),
            });
        }
        for (axis, (&n, &ext)) in nodes.iter().zip(extents).enumerate() {
            if n < 3 {
                return Err(GridError::TooFewNodes { axis, nodes: n });
            }
            if !(ext.is_finite() && ext > 0.0) {
                return Err(GridError::Extent { axis, extent: ext });
            }
        }
        let spacing: Vec<f64> = extents
            .iter()
            .zip(nodes)
            .map(|(&ext, &n)| ext / (n - 1) as f64)
            .collect();

        let mut shape = [1usize; 3];
        shape[..dim].copy_from_slice(nodes);
        let strides = [1, shape[0], shape[0] * shape[1]];

        let axis_weights: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                if a >= dim {
                    return vec![1.0];
                }
                let n = shape[a];
                (0..n)
                    .map(|i| {
                        if i == 0 || i == n - 1 {
                            0.5 * spacing[a]
                        } else {
                            spacing[a]
                        }
                    })
                    .collect()
            })
            .collect();
        let total = shape.iter().product();
        let mut weights = Vec::with_capacity(total);
        for k in 0..shape[2] {
            for j in 0..shape[1] {
                for i in 0..shape[0] {
                    weights.push(axis_weights[0][i] * axis_weights[1][j] * axis_weights[2][k]);
                }
            }
        }

        Ok(Self {
            dim,
            extents: extents.to_vec(),
            nodes: nodes.to_vec(),
            spacing,
            shape,
            strides,
            weights,
        })
    }

    /// Same node count and extent on every axis.
    pub fn cube(dim: usize, extent: f64, nodes: usize) -> Result<Self, GridError> {
        Self::new(dim, &vec![extent; dim], &vec![nodes; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.weights.len()
    }

    /// `|Omega|`.
    pub fn volume(&self) -> f64 {
        self.extents.iter().product()
    }

    /// Trapezoidal quadrature weight of every node.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Flat index of a multi-index; axis 0 varies fastest.
    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(&i, &s)| i * s).sum()
    }

    pub fn multi_index(&self, index: usize) -> [usize; 3] {
        [
            index % self.shape[0],
            (index / self.strides[1]) % self.shape[1],
            index / self.strides[2],
        ]
    }

    /// Physical coordinates of a node; unused axes are zero.
    pub fn coordinates(&self, index: usize) -> [f64; 3] {
        let m = self.multi_index(index);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = m[a] as f64 * self.spacing[a];
        }
        x
    }

    /// Largest diagonal magnitude of the Laplacian stencil, `sum_a 2 / h_a^2`.
    pub fn stencil_diagonal(&self) -> f64 {
        self.spacing.iter().map(|h| 2.0 / (h * h)).sum()
    }

    /// `out = L_h x` with mirror ghost nodes on every face.
    pub fn apply_laplacian(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.node_count());
        debug_assert_eq!(out.len(), self.node_count());
        out.iter_mut().for_each(|o| *o = 0.0);
        for a in 0..self.dim {
            let n = self.shape[a];
            let s = self.strides[a];
            let inv_h2 = 1.0 / (self.spacing[a] * self.spacing[a]);
            for (idx, o) in out.iter_mut().enumerate() {
                let i = (idx / s) % n;
                let left = if i == 0 { idx + s } else { idx - s };
                let right = if i == n - 1 { idx - s } else { idx + s };
                *o += (x[left] - 2.0 * x[idx] + x[right]) * inv_h2;
            }
        }
    }

    /// Weighted inner product `sum_i w_i a_i b_i`.
    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }

    pub fn sum_weighted(&self, v: &[f64]) -> f64 {
        self.weights.iter().zip(v).map(|(w, x)| w * x).sum()
    }

    /// `sum over edges` of `(x_{i+1} - x_i)^2 / h_a` times the transverse weights.
    pub fn gradient_energy(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for a in 0..self.dim {
            let n = self.shape[a];
            let s = self.strides[a];
            let h = self.spacing[a];
            for (idx, w) in self.weights.iter().enumerate() {
                let i = (idx / s) % n;
                if i == n - 1 {
                    continue;
                }
                // transverse weight is the node weight divided by this axis' share
                let axis_w = if i == 0 { 0.5 * h } else { h };
                let transverse = w / axis_w;
                let d = x[idx + s] - x[idx];
                total += transverse * d * d / h;
            }
        }
        total
    }
}

/// Nodal scalar field on a [`Grid`].
#[derive(Clone, PartialEq)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("nodes", &self.grid.nodes)
            .field("min", &self.min())
            .field("max", &self.max())
            .finish()
    }
}

impl Field {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.node_count() {
            return Err(GridError::Length {
                expected: grid.node_count(),
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<Grid>, value: f64) -> Self {
        let n = grid.node_count();
        Self {
            grid,
            values: vec![value; n],
        }
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Samples `f(x)` at every node.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn([f64; 3]) -> f64) -> Result<Self, GridError> {
        let values = (0..grid.node_count())
            .map(|i| f(grid.coordinates(i)))
            .collect();
        Self::new(grid, values)
    }

    pub(crate) fn from_vec_unchecked(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    /// Nodal map. The result is checked for finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Field, GridError> {
        Field::new(
            self.grid.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Nodal binary map of two fields on the same grid.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field, GridError> {
        if !self.same_grid(other) {
            return Err(GridError::GridMismatch);
        }
        Field::new(
            self.grid.clone(),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |a - b|` over nodes.
    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        max_abs_diff(&self.values, &other.values)
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub(crate) fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn build_grid(dim: usize, extents: &[f64], nodes: &[usize]) -> Result<Arc<Grid>, GridError> {
    Grid::new(dim, extents, nodes).map(Arc::new)
}

/// Mirror-stencil Neumann Laplacian `L_h v`.
pub fn laplacian_neumann(v: &Field) -> Field {
    let mut out = vec![0.0; v.len()];
    v.grid.apply_laplacian(&v.values, &mut out);
    Field::from_vec_unchecked(v.grid.clone(), out)
}

/// Trapezoidal quadrature of `v` over the box.
pub fn integrate(v: &Field) -> f64 {
    v.grid.sum_weighted(&v.values)
}

/// Discrete `integral |grad v|^2`, equal to `-integrate(L_h v * v)`.
pub fn dirichlet_energy(v: &Field) -> f64 {
    v.grid.gradient_energy(&v.values)
}

/// `integrate(a * b)`.
pub fn inner(a: &Field, b: &Field) -> f64 {
    debug_assert!(a.same_grid(b));
    a.grid.dot(&a.values, &b.values)
}

/// Discrete eigenvalue of `-L_h` for the mode `cos(m pi x / extent)` on one axis.
pub fn neumann_eigenvalue(m: usize, extent: f64, h: f64) -> f64 {
    let theta = m as f64 * std::f64::consts::PI * h / extent;
    (2.0 - 2.0 * theta.cos()) / (h * h)
}
