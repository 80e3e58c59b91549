//! Numerical core for studying bias lock-in of flow-matching samplers.
//!
//! Everything here is closed form over diagonal Gaussian mixtures, so each
//! velocity, score and density can be checked against an independent oracle:
//!
//! - [`mixture`]: the straight noise-to-data path and the marginal density,
//!   velocity, score and posterior responsibilities it induces.
//! - [`bias`]: condition-indexed families and the teacher/student velocity
//!   models built from them.
//! - [`injection`]: orthogonal residual extraction and velocity injection.
//! - [`sampler`]: Euler ODE steps, Euler–Maruyama SDE steps with the score
//!   correction, the noise schedule and the three-stage pipeline.
//! - [`diagnostics`]: Gram log-volume, effective rank, mode assignment,
//!   correction rates and energy-distance two-sample tests.
//!
//! The crate is `no_std` and only needs `alloc`.
//!
//! ## Time convention
//!
//! `x_t = (1 - t) x_data + t eps`: data sits at `t = 0`, standard normal noise
//! at `t = 1`, and sampling integrates `t` downward. Velocities point from
//! noise toward data, i.e. `v = E[x_data - eps | x_t]`.

#![cfg_attr(not(test), no_std)]
// NaN-rejecting range checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod bias;
pub mod diagnostics;
mod error;
pub mod grid;
pub mod injection;
pub mod linalg;
pub mod mixture;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use mixture::{GaussianComponent, GaussianMixture};
