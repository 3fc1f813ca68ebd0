//! Rothe time stepping for `u_t = Lap(exp(-Lap u)) - exp(-Lap u) + 1` on a box
//! with homogeneous Neumann data, together with the discrete a priori
//! estimates that govern the scheme.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod elliptic;
pub mod estimates;
pub mod grid;
pub mod inner;
pub mod io;
pub mod rothe;
