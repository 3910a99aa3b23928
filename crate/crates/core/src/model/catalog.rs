//! Built-in problems: the coupled sine benchmark and a few diagnostic cases.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::{CoefficientBounds, FbsdeProblem};
use crate::error::{Error, Result};

/// Parameters of the coupled sine benchmark
///
/// ```text
/// dX_d = σ Y dW_d,   d = 1..D
/// f(t, x, y, z) = −r y + ½ e^{−3r(T−t)} σ² (Σ_d sin x_d)³
/// g(x) = Σ_d sin x_d
/// ```
///
/// which decouples through `Y_t = e^{−r(T−t)} Σ_d sin X_{d,t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineParams {
    pub dim: usize,
    pub sigma: f64,
    pub r: f64,
    /// Every component of the initial state.
    pub x0: f64,
    pub horizon: f64,
}

impl SineParams {
    /// Benchmark defaults: `x0 = π/2` per component and `T = 1`.
    pub fn new(dim: usize, sigma: f64, r: f64) -> Self {
        Self { dim, sigma, r, x0: FRAC_PI_2, horizon: 1.0 }
    }

    pub fn problem(&self) -> Result<FbsdeProblem> {
        sine_example(self.dim, self.sigma, self.r, self.x0, self.horizon)
    }

    /// Closed-form `u(t, x) = e^{−r(T−t)} Σ_d sin x_d`.
    pub fn exact_value(&self, t: f64, x: &[f64]) -> f64 {
        (-self.r * (self.horizon - t)).exp() * x.iter().map(|v| v.sin()).sum::<f64>()
    }

    pub fn exact_y0(&self) -> f64 {
        self.exact_value(0.0, &vec![self.x0; self.dim])
    }

    /// Analytic constants under the Euclidean/Frobenius convention.
    ///
    /// The x-Lipschitz constant of the cubic term uses
    /// `sup_x (Σ sin x_d)^4 Σ cos² x_d = 4 D^5 / 27`, attained with every
    /// `sin x_d = √(2/3)`. When `r ≠ 0` the x- and y-contributions to `f` are
    /// split with `|a + b|² ≤ 2|a|² + 2|b|²`, hence the factor 2.
    pub fn bounds(&self) -> CoefficientBounds {
        let d = self.dim as f64;
        let decay = (-3.0 * self.r * self.horizon).exp().max(1.0);
        let cubic = 0.5 * self.sigma * self.sigma * decay;
        let split = if self.r == 0.0 { 1.0 } else { 2.0 };
        CoefficientBounds {
            k_lip: 0.0,
            k_b: 0.0,
            k_f: -self.r,
            b_y: 0.0,
            sigma_x: 0.0,
            sigma_y: d * self.sigma * self.sigma,
            f_x: split * cubic * cubic * 9.0 * 4.0 * d.powi(5) / 27.0,
            f_z: 0.0,
            g_x: d,
            b_0: 0.0,
            sigma_0: 0.0,
            f_0: split * cubic * cubic * d.powi(6),
            g_0: 0.0,
        }
        .with_tight_k()
        .with_k_at_least(split * self.r * self.r)
    }
}

impl CoefficientBounds {
    pub(crate) fn with_k_at_least(mut self, k: f64) -> Self {
        self.k_lip = self.k_lip.max(k);
        self
    }
}

/// The coupled sine benchmark on `[0, horizon]` with every `x0` component equal.
pub fn sine_example(dim: usize, sigma: f64, r: f64, x0_component: f64, horizon: f64) -> Result<FbsdeProblem> {
    if dim < 1 {
        return Err(Error::InvalidArgument("sine example needs D >= 1".into()));
    }
    if !(sigma.is_finite() && sigma > 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("need sigma > 0 and finite r (sigma = {sigma}, r = {r})")));
    }
    let n_w = dim;
    FbsdeProblem::builder(dim, dim)
        .name("sine")
        .horizon(horizon)
        .x0(vec![x0_component; dim])
        .diffusion(move |_, _, y, out| {
            out.fill(0.0);
            let s = sigma * y;
            for d in 0..n_w {
                out[d * n_w + d] = s;
            }
        })
        .driver(move |t, x, y, _| {
            let s: f64 = x.iter().map(|v| v.sin()).sum();
            -r * y + 0.5 * (-3.0 * r * (horizon - t)).exp() * sigma * sigma * s * s * s
        })
        .terminal(|x| x.iter().map(|v| v.sin()).sum())
        .build()
}

/// `b ≡ drift`, `σ ≡ sigma · I`, `f ≡ 0`, `g(x) = Σ x_d`. Decoupled.
pub fn constant_drift(dim: usize, drift: f64, sigma: f64, x0: f64, horizon: f64) -> Result<(FbsdeProblem, CoefficientBounds)> {
    let problem = FbsdeProblem::builder(dim, dim)
        .name("constant-drift")
        .horizon(horizon)
        .x0(vec![x0; dim])
        .drift(move |_, _, _, out| out.fill(drift))
        .diffusion(move |_, _, _, out| {
            out.fill(0.0);
            for d in 0..dim {
                out[d * dim + d] = sigma;
            }
        })
        .terminal(|x| x.iter().sum())
        .build()?;
    let d = dim as f64;
    let bounds = CoefficientBounds {
        g_x: d,
        b_0: d * drift * drift,
        sigma_0: d * sigma * sigma,
        ..CoefficientBounds::zero()
    }
    .with_tight_k();
    Ok((problem, bounds))
}

/// Driftless Brownian forward with linear terminal `g(x) = Σ x_d`.
pub fn brownian_terminal(dim: usize, sigma: f64, x0: f64, horizon: f64) -> Result<(FbsdeProblem, CoefficientBounds)> {
    let (p, b) = constant_drift(dim, 0.0, sigma, x0, horizon)?;
    Ok((FbsdeProblem { name: "brownian-terminal".into(), ..p }, b))
}

/// Driftless Brownian forward with `g(x) = |x|²`. Not Lipschitz, so no bounds.
pub fn quadratic_terminal(dim: usize, sigma: f64, x0: f64, horizon: f64) -> Result<FbsdeProblem> {
    FbsdeProblem::builder(dim, dim)
        .name("quadratic-terminal")
        .horizon(horizon)
        .x0(vec![x0; dim])
        .diffusion(move |_, _, _, out| {
            out.fill(0.0);
            for d in 0..dim {
                out[d * dim + d] = sigma;
            }
        })
        .terminal(|x| x.iter().map(|v| v * v).sum())
        .build()
}

/// The linear system `dX = Y dt`, `dY = −X dt + Z dW`, `Y_T = −X_T` on
/// `[0, 3π/4]`, which has no solution for `x0 ≠ 0`.
pub fn counterexample(x0: f64, horizon: f64) -> Result<FbsdeProblem> {
    FbsdeProblem::builder(1, 1)
        .name("counterexample")
        .horizon(horizon)
        .x0(vec![x0])
        .drift(|_, _, y, out| out[0] = y)
        .driver(|_, x, _, _| x[0])
        .terminal(|x| -x[0])
        .build()
}

pub fn counterexample_bounds() -> CoefficientBounds {
    CoefficientBounds { k_lip: 1.0, b_y: 1.0, f_x: 1.0, g_x: 1.0, ..CoefficientBounds::zero() }
}
