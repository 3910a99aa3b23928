//! Problem data for a coupled forward-backward SDE
//!
//! ```text
//! X_t = x0 + ∫ b(s, X_s, Y_s) ds + ∫ σ(s, X_s, Y_s) dW_s
//! Y_t = g(X_T) + ∫_t^T f(s, X_s, Y_s, Z_s) ds − ∫_t^T Z_s dW_s
//! ```
//!
//! The coefficients are opaque callables. Their Lipschitz, growth and
//! monotonicity constants are supplied separately as [`CoefficientBounds`];
//! [`validate_problem`] can only falsify them on random probes.
//!
//! Norm convention for the multi-dimensional constants: Euclidean norms on
//! vectors, Frobenius norm on the diffusion matrix.

mod catalog;
mod validate;

pub use catalog::{
    brownian_terminal, constant_drift, counterexample, counterexample_bounds, quadratic_terminal,
    sine_example, SineParams,
};
pub use validate::{validate_problem, ProbeCheck, ProbeConfig, ValidationReport, Violation};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `b(t, x, y)` written into an output slice of length `dim_x`.
pub type DriftFn = dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync;
/// `σ(t, x, y)` written row-major into a slice of length `dim_x * dim_w`.
pub type DiffusionFn = dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync;
/// `f(t, x, y, z)`.
pub type DriverFn = dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync;
/// `g(x)`.
pub type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Coefficients, dimensions, horizon and initial state of an FBSDE.
///
/// Cloning is cheap: the callables are reference counted. All callables must
/// be re-entrant since paths are simulated concurrently.
#[derive(Clone)]
pub struct FbsdeProblem {
    name: String,
    dim_x: usize,
    dim_w: usize,
    horizon: f64,
    x0: Vec<f64>,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    driver: Arc<DriverFn>,
    terminal: Arc<TerminalFn>,
}

impl fmt::Debug for FbsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FbsdeProblem")
            .field("name", &self.name)
            .field("dim_x", &self.dim_x)
            .field("dim_w", &self.dim_w)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .finish_non_exhaustive()
    }
}

impl FbsdeProblem {
    /// Starts a builder with all coefficients identically zero, `T = 1` and `x0 = 0`.
    pub fn builder(dim_x: usize, dim_w: usize) -> FbsdeProblemBuilder {
        FbsdeProblemBuilder {
            name: "custom".to_string(),
            dim_x,
            dim_w,
            horizon: 1.0,
            x0: vec![0.0; dim_x],
            drift: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
            diffusion: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
            driver: Arc::new(|_, _, _, _| 0.0),
            terminal: Arc::new(|_| 0.0),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_w(&self) -> usize {
        self.dim_w
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], y: f64, out: &mut [f64]) {
        (self.drift)(t, x, y, out)
    }

    #[inline]
    pub fn diffusion(&self, t: f64, x: &[f64], y: f64, out: &mut [f64]) {
        (self.diffusion)(t, x, y, out)
    }

    #[inline]
    pub fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.driver)(t, x, y, z)
    }

    #[inline]
    pub fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    /// Shared handle to `g`, e.g. for appending it to a regression basis.
    pub fn terminal_fn(&self) -> Arc<TerminalFn> {
        Arc::clone(&self.terminal)
    }

    /// Same coefficients on a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        Ok(Self { horizon, ..self.clone() })
    }

    /// Same coefficients from a different initial state.
    pub fn with_x0(&self, x0: Vec<f64>) -> Result<Self> {
        check_x0(&x0, self.dim_x)?;
        Ok(Self { x0, ..self.clone() })
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive and finite, got {horizon}")));
    }
    Ok(())
}

fn check_x0(x0: &[f64], dim_x: usize) -> Result<()> {
    if x0.len() != dim_x {
        return Err(Error::InvalidArgument(format!(
            "x0 has length {} but dim_x = {dim_x}",
            x0.len()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("x0 must be finite".into()));
    }
    Ok(())
}

pub struct FbsdeProblemBuilder {
    name: String,
    dim_x: usize,
    dim_w: usize,
    horizon: f64,
    x0: Vec<f64>,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    driver: Arc<DriverFn>,
    terminal: Arc<TerminalFn>,
}

impl FbsdeProblemBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = x0;
        self
    }

    pub fn drift(mut self, f: impl Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn diffusion(mut self, f: impl Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn driver(mut self, f: impl Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.driver = Arc::new(f);
        self
    }

    pub fn terminal(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(f);
        self
    }

    pub fn build(self) -> Result<FbsdeProblem> {
        if self.dim_x == 0 || self.dim_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "dimensions must be at least 1 (dim_x = {}, dim_w = {})",
                self.dim_x, self.dim_w
            )));
        }
        check_horizon(self.horizon)?;
        check_x0(&self.x0, self.dim_x)?;
        Ok(FbsdeProblem {
            name: self.name,
            dim_x: self.dim_x,
            dim_w: self.dim_w,
            horizon: self.horizon,
            x0: self.x0,
            drift: self.drift,
            diffusion: self.diffusion,
            driver: self.driver,
            terminal: self.terminal,
        })
    }
}

/// Squared Lipschitz, growth and monotonicity constants of the coefficients.
///
/// `k_b` and `k_f` are one-sided (monotonicity) constants and may be
/// negative; all others are squared constants and nonnegative. `k_lip` is the
/// global constant `K` that bounds every other entry in absolute value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub k_lip: f64,
    pub k_b: f64,
    pub k_f: f64,
    pub b_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub f_x: f64,
    pub f_z: f64,
    pub g_x: f64,
    pub b_0: f64,
    pub sigma_0: f64,
    pub f_0: f64,
    pub g_0: f64,
}

impl Default for CoefficientBounds {
    fn default() -> Self {
        Self::zero()
    }
}

impl CoefficientBounds {
    pub const fn zero() -> Self {
        Self {
            k_lip: 0.0,
            k_b: 0.0,
            k_f: 0.0,
            b_y: 0.0,
            sigma_x: 0.0,
            sigma_y: 0.0,
            f_x: 0.0,
            f_z: 0.0,
            g_x: 0.0,
            b_0: 0.0,
            sigma_0: 0.0,
            f_0: 0.0,
            g_0: 0.0,
        }
    }

    fn bounded_entries(&self) -> [(&'static str, f64); 12] {
        [
            ("k_b", self.k_b.abs()),
            ("k_f", self.k_f.abs()),
            ("b_y", self.b_y),
            ("sigma_x", self.sigma_x),
            ("sigma_y", self.sigma_y),
            ("f_x", self.f_x),
            ("f_z", self.f_z),
            ("g_x", self.g_x),
            ("b_0", self.b_0),
            ("sigma_0", self.sigma_0),
            ("f_0", self.f_0),
            ("g_0", self.g_0),
        ]
    }

    /// Raises `k_lip` to the largest of the other entries if it is smaller.
    pub fn with_tight_k(mut self) -> Self {
        let max = self.bounded_entries().iter().fold(0.0_f64, |m, &(_, v)| m.max(v));
        self.k_lip = self.k_lip.max(max);
        self
    }

    /// Checks signs, finiteness, and that `k_lip` dominates every entry.
    pub fn validate(&self) -> Result<()> {
        if !(self.k_lip.is_finite() && self.k_lip >= 0.0) {
            return Err(Error::InvalidArgument(format!("k_lip must be finite and >= 0, got {}", self.k_lip)));
        }
        for (name, value) in self.bounded_entries() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {value}")));
            }
            if value > self.k_lip {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {value} exceeds the global bound k_lip = {}",
                    self.k_lip
                )));
            }
        }
        Ok(())
    }
}

/// Uniform time grid `t_i = i h`, `h = T / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
    horizon: f64,
    h: f64,
}

impl Grid {
    pub fn new(horizon: f64, n: usize) -> Result<Self> {
        check_horizon(horizon)?;
        if n == 0 {
            return Err(Error::InvalidArgument("number of time steps must be at least 1".into()));
        }
        Ok(Self { n, horizon, h: horizon / n as f64 })
    }

    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// `t_i`; the last node is exactly `T`.
    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i == self.n {
            self.horizon
        } else {
            i as f64 * self.h
        }
    }
}
