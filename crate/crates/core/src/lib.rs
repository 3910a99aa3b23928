//! Markovian iteration for coupled forward-backward SDEs.
//!
//! The crate is organised along the pipeline of the method:
//!
//! * [`model`] describes a coupled FBSDE and the Lipschitz / growth bounds of its coefficients,
//! * [`conditions`] evaluates the closed-form constants that decide whether the iteration converges,
//! * [`paths`] simulates Brownian increments and forward Euler paths,
//! * [`regression`] projects onto a quadratic basis by pivoted QR least squares,
//! * [`solver`] alternates forward simulation and backward regression until `Y0` settles,
//! * [`oracle`] computes a deterministic 1-D reference solution by Gauss-Hermite quadrature.

pub mod conditions;
pub mod error;
pub mod model;
pub mod oracle;
pub mod paths;
pub mod regression;
pub mod solver;

pub use error::{Error, Result};
pub use model::{CoefficientBounds, FbsdeProblem, Grid};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/problems.md")]
    mod problems {}
    #[doc = include_str!("../../../book/src/conditions.md")]
    mod conditions {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/regression.md")]
    mod regression {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
}
