//! Multivariate Hawkes processes and their critical scaling limits.
//!
//! The crate covers the whole pipeline from exciting kernels to the limiting
//! stochastic Volterra equations:
//!
//! - [`matlin`]: spectral radius, real Schur form, block inversion and the
//!   admissible `(K, ell, Q, U)` structure;
//! - [`kernels`]: parametric kernels, Laplace transforms, discretized resolvents
//!   and the rescaled diagnostics;
//! - [`bernstein`]: extended Bernstein functions, potential measures and prelimit
//!   kernel construction;
//! - [`hawkes`]: exact simulation and Monte Carlo Fourier-Laplace functionals;
//! - [`riccati`]: prelimit, rescaled and limit Riccati-Volterra solvers;
//! - [`sve`]: simulation of the limit Volterra equations.
//!
//! Dense matrices are generic over [`Scalar`]; everything above the linear
//! algebra works in `f64` through the aliases below.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bernstein;
pub mod error;
pub mod grid;
pub mod hawkes;
pub mod kernels;
pub mod matlin;
pub mod mc;
pub mod quad;
pub mod riccati;
pub mod scalar;
pub mod sve;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Complex scalar used by the Riccati solvers.
pub type C64 = num_complex::Complex<f64>;
/// Dense `f64` matrix.
pub type Matrix = matlin::Mat<f64>;
/// Admissible structure over `f64`.
pub type AdmissibleStructure = matlin::Admissible<f64>;
