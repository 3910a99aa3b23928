//! Closed-form convergence constants and the three convergence conditions.
//!
//! Everything here is a pure function of a [`CoefficientBounds`] value and
//! the horizon. Exponentials are allowed to saturate to `+inf`; a condition
//! involving an infinite constant simply fails.
//!
//! The helper functions are
//!
//! ```text
//! Γ0(x)      = (e^x − 1) / x                       (Γ0(0) = 1)
//! Γ1(x, y)   = sup_{0<θ<1} θ e^{θx} Γ0(θy)
//! Γ0^i(x)    = ((1 + xh)^i − 1) / x                (Γ0^i(0) = i h)
//! Γ1^n(x, y) = max_{0≤i≤n} (1 + xh)^i Γ0^i(y)
//! ```
//!
//! `θ ↦ θ e^{θx} Γ0(θy) = e^{θx}(e^{θy} − 1)/y` has derivative
//! `e^{θx}((x + y)e^{θy} − x)/y`, which is positive at `θ = 0` and changes
//! sign at most once. The supremum is therefore either the value at `θ = 1`
//! or, when `x + y < 0`, the value at the stationary point
//! `θ* = ln(x / (x + y)) / y` if it lies in `(0, 1)`.

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::model::CoefficientBounds;

const TAYLOR_CUTOFF: f64 = 1e-6;

/// `(e^x − 1)/x` with the removable singularity filled by 1.
pub fn gamma0(x: f64) -> f64 {
    if x.abs() < TAYLOR_CUTOFF {
        1.0 + x / 2.0 + x * x / 6.0
    } else {
        x.exp_m1() / x
    }
}

/// `ln Γ0(x)` without intermediate overflow.
fn ln_gamma0(x: f64) -> f64 {
    if x > 700.0 {
        x + (-(-x).exp()).ln_1p() - x.ln()
    } else {
        gamma0(x).ln()
    }
}

/// `θ e^{θx} Γ0(θy)` evaluated in log space.
pub fn gamma1_integrand(theta: f64, x: f64, y: f64) -> f64 {
    if theta <= 0.0 {
        return 0.0;
    }
    (theta.ln() + theta * x + ln_gamma0(theta * y)).exp()
}

/// `sup_{0<θ<1} θ e^{θx} Γ0(θy)`.
pub fn gamma1(x: f64, y: f64) -> f64 {
    let at_one = gamma1_integrand(1.0, x, y);
    let s = x + y;
    if s >= 0.0 {
        return at_one;
    }
    let theta = if y == 0.0 { -1.0 / x } else { (-y / s).ln_1p() / y };
    if theta > 0.0 && theta < 1.0 {
        at_one.max(gamma1_integrand(theta, x, y))
    } else {
        at_one
    }
}

/// `((1 + xh)^i − 1)/x`, equal to `i h` at `x = 0`.
pub fn gamma0_discrete(i: usize, x: f64, h: f64) -> f64 {
    if i == 0 {
        return 0.0;
    }
    let fi = i as f64;
    if x.abs() < TAYLOR_CUTOFF {
        let c2 = fi * (fi - 1.0) / 2.0;
        let c3 = c2 * (fi - 2.0) / 3.0;
        return fi * h + c2 * x * h * h + c3 * x * x * h * h * h;
    }
    let base = x * h;
    if base > -1.0 {
        (fi * base.ln_1p()).exp_m1() / x
    } else {
        ((1.0 + base).powi(i as i32) - 1.0) / x
    }
}

fn discrete_power(i: usize, x: f64, h: f64) -> f64 {
    let base = x * h;
    if base > -1.0 {
        (i as f64 * base.ln_1p()).exp()
    } else {
        (1.0 + base).powi(i as i32)
    }
}

/// `max_{0≤i≤n} (1 + xh)^i Γ0^i(y)`.
pub fn gamma1_discrete(n: usize, x: f64, y: f64, h: f64) -> f64 {
    (0..=n).map(|i| discrete_power(i, x, h) * gamma0_discrete(i, y, h)).fold(0.0, f64::max)
}

/// Auxiliary weights of the one-step estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaSchedule {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// Largest step for which `1 − (1 + K)√h − K h > 0`.
pub fn max_schedule_step(k_lip: f64) -> f64 {
    let s = if k_lip == 0.0 {
        1.0
    } else {
        (-(1.0 + k_lip) + ((1.0 + k_lip).powi(2) + 4.0 * k_lip).sqrt()) / (2.0 * k_lip)
    };
    s * s
}

/// `λ1 = 0`, `λ2 = √h`, `λ3 = 1 − (1 + K)√h − K h`, so that `A3 = 1`.
pub fn lambda_schedule(k_lip: f64, h: f64) -> Result<LambdaSchedule> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let root = h.sqrt();
    let lambda3 = 1.0 - (1.0 + k_lip) * root - k_lip * h;
    if lambda3 <= 0.0 {
        return Err(Error::ScheduleInfeasible { h, max_h: max_schedule_step(k_lip) });
    }
    Ok(LambdaSchedule { lambda1: 0.0, lambda2: root, lambda3 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AConstants {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub a5: f64,
}

pub fn a_constants(b: &CoefficientBounds, lambda: &LambdaSchedule, h: f64) -> Result<AConstants> {
    if !(lambda.lambda2 > 0.0 && lambda.lambda3 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda2 and lambda3 must be positive (got {}, {})",
            lambda.lambda2, lambda.lambda3
        )));
    }
    let k = b.k_lip;
    let weighted = (1.0 + 1.0 / lambda.lambda2) * k * h;
    Ok(AConstants {
        a1: 2.0 * b.k_b + b.sigma_x + 1.0 + k * h,
        a2: b.b_y + b.sigma_y + k * h,
        a3: lambda.lambda2 + lambda.lambda3 + weighted,
        a4: 2.0 * b.k_f + 1.0 + b.f_z / lambda.lambda3 + weighted,
        a5: b.f_x + weighted,
    })
}

/// `(B1, B2) = (b0 + σ0 + K b0 h, f0 + K f0 h)`.
pub fn b_constants(b: &CoefficientBounds, h: f64) -> (f64, f64) {
    (b.b_0 + b.sigma_0 + b.k_lip * b.b_0 * h, b.f_0 + b.k_lip * b.f_0 * h)
}

/// `coef * value`, with an exactly vanishing coefficient annihilating an infinite value.
fn weighted(coef: f64, value: f64) -> f64 {
    if coef == 0.0 {
        0.0
    } else {
        coef * value
    }
}

fn coupling(b: &CoefficientBounds) -> f64 {
    b.b_y + b.sigma_y
}

/// The Lipschitz-control constants `(L0, L1)`.
pub fn l0_l1(b: &CoefficientBounds, horizon: f64) -> (f64, f64) {
    let t = horizon;
    let reach = b.g_x + b.f_x * t;
    let linear = weighted(coupling(b), reach) * t;
    let exponent = linear + (2.0 * b.k_b + 2.0 * b.k_f + 2.0 + b.sigma_x + b.f_z) * t;
    let growth = exponent.exp();
    (weighted(linear, growth), weighted(reach, growth.max(1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthConstants {
    pub c0: f64,
    pub c1: f64,
    pub l2: f64,
}

/// `c0(G)`, `c1(G)` and `L2(G)` of the linear-growth estimate.
pub fn c0_c1_l2(b: &CoefficientBounds, horizon: f64, g: f64) -> GrowthConstants {
    let t = horizon;
    let backward = (2.0 * b.k_f + 1.0 + b.f_z) * t;
    let forward = (2.0 * b.k_b + 1.0 + b.sigma_x) * t + weighted(coupling(b), g) * t;
    let c0 = t * (weighted(b.g_x, gamma1(backward, forward))
        + weighted(b.f_x * t, gamma0(backward) * gamma0(forward)));
    let c1 = weighted(coupling(b), c0);
    let l2 = weighted(b.g_0, backward.max(0.0).exp())
        + weighted(b.f_0 * t, gamma0(backward))
        + weighted(b.b_0 + b.sigma_0, c0);
    GrowthConstants { c0, c1, l2 }
}

/// Discrete-time `c0(λ, h, G)`, `c1(λ, h, G)`, `L2(λ, h, G)` with the schedule at `h = T/n`.
pub fn c0_c1_l2_discrete(b: &CoefficientBounds, n: usize, horizon: f64, g: f64) -> Result<GrowthConstants> {
    let h = horizon / n as f64;
    let a = a_constants(b, &lambda_schedule(b.k_lip, h)?, h)?;
    let (b1, b2) = b_constants(b, h);
    let forward = a.a1 + weighted(a.a2, g);
    let c0 = weighted(b.g_x, gamma1_discrete(n, a.a4, forward, h))
        + weighted(a.a5, gamma0_discrete(n, a.a4, h) * gamma0_discrete(n, forward, h));
    let c1 = weighted(a.a2, c0);
    let l2 = weighted(b1, c0) + weighted(b.g_0, (a.a4 * horizon).exp().max(1.0)) + weighted(b2, gamma0_discrete(n, a.a4, h));
    Ok(GrowthConstants { c0, c1, l2 })
}

/// `c2(λ1, L, G)` for one value of the free weight `λ1 > 0`.
pub fn c2_at(b: &CoefficientBounds, horizon: f64, lambda1: f64, l: f64, g: f64) -> f64 {
    let t = horizon;
    let cpl = coupling(b);
    if cpl == 0.0 {
        return 0.0;
    }
    let base = 2.0 * b.k_b + 1.0 + b.sigma_x;
    let front = ((base + cpl * g) * t).exp().max(1.0) * (1.0 + 1.0 / lambda1) * cpl * t;
    let backward = (2.0 * b.k_f + 1.0 + b.f_z) * t;
    let forward = (base + (1.0 + lambda1) * weighted(cpl, l)) * t;
    let bracket = weighted(b.g_x, gamma1(backward, forward))
        + weighted(b.f_x * t, gamma0(backward) * gamma0(forward));
    weighted(bracket, front)
}

/// Number of log-spaced `λ1` nodes on `[1e-4, 1e4]`.
pub const C2_GRID: usize = 200;
const C2_LOG_LO: f64 = -4.0;
const C2_LOG_HI: f64 = 4.0;

/// `inf_{λ1>0} c2(λ1, L, G)`.
///
/// Minimised over 200 log-spaced `λ1 ∈ [1e-4, 1e4]` with golden-section
/// refinement (in `ln λ1`) around the best node. When `(b_y + σ_y) L = 0`
/// the map is decreasing in `λ1` and the `λ1 → ∞` limit is included. The
/// result never exceeds the value at any probed `λ1`.
pub fn c2(b: &CoefficientBounds, horizon: f64, l: f64, g: f64) -> f64 {
    if coupling(b) == 0.0 {
        return 0.0;
    }
    let eval = |log10: f64| c2_at(b, horizon, 10f64.powf(log10), l, g);
    let step = (C2_LOG_HI - C2_LOG_LO) / (C2_GRID - 1) as f64;
    let mut best = (f64::INFINITY, 0usize);
    for k in 0..C2_GRID {
        let v = eval(C2_LOG_LO + k as f64 * step);
        if v < best.0 {
            best = (v, k);
        }
    }
    let mut value = best.0;
    if value.is_finite() {
        let lo = C2_LOG_LO + best.1.saturating_sub(1) as f64 * step;
        let hi = C2_LOG_LO + (best.1 + 1).min(C2_GRID - 1) as f64 * step;
        value = value.min(golden_min(eval, lo, hi, 60));
    }
    if weighted(coupling(b), l) == 0.0 {
        // λ1 → ∞ limit of (1 + 1/λ1) is 1.
        let limit = c2_at(b, horizon, f64::INFINITY, l, g);
        value = value.min(limit);
    }
    value
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut best = fc.min(fd);
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        best = best.min(fc).min(fd);
    }
    best
}

/// Discrete `c2(λ1, h, L, G)` with `h = T/n` and `λ2, λ3` from [`lambda_schedule`].
pub fn c2_discrete(b: &CoefficientBounds, n: usize, horizon: f64, lambda1: f64, l: f64, g: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if !(lambda1 > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda1 must be positive, got {lambda1}")));
    }
    let h = horizon / n as f64;
    let a = a_constants(b, &lambda_schedule(b.k_lip, h)?, h)?;
    if a.a2 == 0.0 {
        return Ok(0.0);
    }
    let front = ((a.a1 + a.a2 * g) * horizon).exp().max(1.0) * (1.0 + 1.0 / lambda1) * a.a2;
    let forward = a.a1 + (1.0 + lambda1) * weighted(a.a2, l);
    let bracket = weighted(b.g_x, gamma1_discrete(n, a.a4, forward, h))
        + weighted(a.a5, gamma0_discrete(n, a.a4, h) * gamma0_discrete(n, forward, h));
    Ok(weighted(bracket, front))
}

/// JSON has no infinity; saturated constants are written as `null` and read back as `+inf`.
fn saturated<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// Outcome of the three convergence conditions for one set of bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    #[serde(rename = "l0", deserialize_with = "saturated")]
    pub l0: f64,
    #[serde(rename = "l1", deserialize_with = "saturated")]
    pub l1: f64,
    #[serde(rename = "c1", deserialize_with = "saturated")]
    pub c1_at_l1: f64,
    #[serde(rename = "l2", deserialize_with = "saturated")]
    pub l2_at_l1: f64,
    #[serde(rename = "c2", deserialize_with = "saturated")]
    pub c2_at_l1: f64,
    /// `L0 < e^{-1}`: uniform Lipschitz control of the iterates.
    #[serde(rename = "cond_3_2")]
    pub lipschitz_control: bool,
    /// `c1(L1) < 1`: uniform linear-growth control.
    #[serde(rename = "cond_4_2")]
    pub growth_control: bool,
    /// `c2(L1, L1) < 1`: geometric convergence of the iteration.
    #[serde(rename = "cond_5_1")]
    pub contraction: bool,
    /// Midpoint of `(c2(L1, L1), 1)`; absent when the contraction condition fails.
    #[serde(rename = "rate")]
    pub predicted_rate: Option<f64>,
    #[serde(rename = "l_bar")]
    pub bound_l_bar: f64,
    #[serde(rename = "g_bar")]
    pub bound_g_bar: f64,
    #[serde(rename = "h_bar")]
    pub bound_h_bar: f64,
}

/// Default slack `ε` in `L̄ = Ḡ = (1 + ε) L1`.
pub const DEFAULT_SLACK: f64 = 0.01;

pub fn check_conditions(b: &CoefficientBounds, horizon: f64, slack: f64) -> Result<ConditionReport> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let (l0, l1) = l0_l1(b, horizon);
    let growth = c0_c1_l2(b, horizon, l1);
    let c2v = c2(b, horizon, l1, l1);
    let lipschitz_control = l0 < (-1.0f64).exp();
    let growth_control = growth.c1 < 1.0;
    let contraction = c2v < 1.0;
    Ok(ConditionReport {
        l0,
        l1,
        c1_at_l1: growth.c1,
        l2_at_l1: growth.l2,
        c2_at_l1: c2v,
        lipschitz_control,
        growth_control,
        contraction,
        predicted_rate: contraction.then_some(0.5 * (c2v + 1.0)),
        bound_l_bar: (1.0 + slack) * l1,
        bound_g_bar: (1.0 + slack) * l1,
        bound_h_bar: if growth_control { growth.l2 / (1.0 - growth.c1) } else { f64::INFINITY },
    })
}

impl ConditionReport {
    pub fn all_hold(&self) -> bool {
        self.lipschitz_control && self.growth_control && self.contraction
    }
}
