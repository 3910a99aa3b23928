//! The Markovian iteration.
//!
//! Starting from `ū⁰ ≡ 0`, iteration `m` runs the forward Euler pass with
//! `ū^{m−1}` inside the coefficients and then a backward regression pass:
//!
//! ```text
//! Ȳ_{i+1} = ū_{i+1}(X̄_{i+1})                       (ū_n = g)
//! v̄_i     = argmin E|Ȳ_{i+1} ΔW_{i+1}/h − v(X̄_i)|²,   Z̄_i = v̄_i(X̄_i)
//! ū_i     = argmin E|Ȳ_{i+1} + f(t_i, X̄_i, Ȳ_{i+1}, Z̄_i) h − u(X̄_i)|²
//! ```
//!
//! for `i = n−1, …, 1`. At `i = 0` all paths sit at `x0`, so sample means
//! replace the regressions:
//! `Z̄₀ = mean(Ȳ₁ ΔW₁)/h` and `Ȳ₀ = mean(Ȳ₁ + f(0, x0, Ȳ₁, Z̄₀) h)`.
//! The loop stops once `|Ȳ₀^m − Ȳ₀^{m−1}| < tol` (with `Ȳ₀⁰ = 0`) or at `m_max`.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditions::{check_conditions, ConditionReport, DEFAULT_SLACK};
use crate::error::{Error, Result};
use crate::model::{CoefficientBounds, FbsdeProblem, Grid, TerminalFn};
use crate::paths::{
    forward_paths, generate_increments_with_budget, IncrementSet, PathEnsemble, ValueFunction, ZeroValue,
    DEFAULT_INCREMENT_BUDGET,
};
use crate::regression::{design_matrix, evaluate_fit, make_basis, BasisSet, FitRecord, QrFactorization, RegressionFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Number of simulated paths `Λ`.
    pub paths: usize,
    pub seed: u64,
    /// Clamp level `R` of the quadratic basis terms.
    pub truncation: f64,
    /// Append the terminal function to the basis.
    pub include_terminal: bool,
    pub ridge: f64,
    pub tol: f64,
    pub m_max: usize,
    /// Draw fresh increments for every iteration instead of reusing one sample.
    pub resample_per_iteration: bool,
    /// Also require `sup |ū^m − ū^{m−1}| < tol` on a probe set before stopping.
    pub stop_on_function_change: bool,
    /// Cap on stored increment entries `Λ · n · d_w`.
    pub increment_budget: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            paths: 50_000,
            seed: 0,
            truncation: 10.0,
            include_terminal: false,
            ridge: 0.0,
            tol: 1e-4,
            m_max: 50,
            resample_per_iteration: false,
            stop_on_function_change: false,
            increment_budget: DEFAULT_INCREMENT_BUDGET,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.paths == 0 {
            return bad("paths must be at least 1".into());
        }
        if self.m_max == 0 {
            return bad("m_max must be at least 1".into());
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if !(self.truncation > 0.0) {
            return bad(format!("truncation must be positive, got {}", self.truncation));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("ridge must be nonnegative, got {}", self.ridge));
        }
        Ok(())
    }

    /// Seed of the increments used in iteration `m`.
    pub fn iteration_seed(&self, m: usize) -> u64 {
        if self.resample_per_iteration {
            splitmix64(self.seed.wrapping_add(m as u64))
        } else {
            self.seed
        }
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `ū_i`, `v̄_i` of one iteration.
#[derive(Clone)]
pub struct ValueFunctionEstimate {
    grid: Grid,
    basis: BasisSet,
    terminal: Arc<TerminalFn>,
    dim_w: usize,
    /// `u_fits[i − 1]` for `i = 1..n−1`.
    u_fits: Vec<RegressionFit>,
    v_fits: Vec<Vec<RegressionFit>>,
    y0: f64,
    z0: Vec<f64>,
}

impl std::fmt::Debug for ValueFunctionEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ValueFunctionEstimate")
            .field("grid", &self.grid)
            .field("basis", &self.basis)
            .field("y0", &self.y0)
            .field("z0", &self.z0)
            .finish_non_exhaustive()
    }
}

impl ValueFunctionEstimate {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn z0(&self) -> &[f64] {
        &self.z0
    }

    /// Fit of `ū_i`, `1 ≤ i ≤ n − 1`.
    pub fn u_fit(&self, i: usize) -> Option<&RegressionFit> {
        i.checked_sub(1).and_then(|k| self.u_fits.get(k))
    }

    /// Fits of the components of `v̄_i`, `1 ≤ i ≤ n − 1`.
    pub fn v_fits(&self, i: usize) -> Option<&[RegressionFit]> {
        i.checked_sub(1).and_then(|k| self.v_fits.get(k)).map(|v| v.as_slice())
    }

    pub fn u(&self, i: usize, x: &[f64]) -> f64 {
        let n = self.grid.steps();
        if i == 0 {
            self.y0
        } else if i >= n {
            (self.terminal)(x)
        } else {
            evaluate_fit(&self.basis, &self.u_fits[i - 1].coefficients, x)
        }
    }

    pub fn v(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let n = self.grid.steps();
        if i == 0 {
            self.z0.clone()
        } else if i >= n {
            vec![0.0; self.dim_w]
        } else {
            self.v_fits[i - 1].iter().map(|f| evaluate_fit(&self.basis, &f.coefficients, x)).collect()
        }
    }

    /// Serializable form: grid and basis metadata plus one [`FitRecord`] per fit.
    pub fn to_record(&self) -> EstimateRecord {
        EstimateRecord {
            n: self.grid.steps(),
            horizon: self.grid.horizon(),
            h: self.grid.step_size(),
            basis_dim: self.basis.dim(),
            basis_count: self.basis.count(),
            truncation: self.basis.truncation(),
            include_terminal: self.basis.include_terminal(),
            y0: self.y0,
            z0: self.z0.clone(),
            u_fits: self.u_fits.iter().enumerate().map(|(k, f)| FitRecord::new(k + 1, f)).collect(),
            v_fits: self
                .v_fits
                .iter()
                .enumerate()
                .map(|(k, fs)| fs.iter().map(|f| FitRecord::new(k + 1, f)).collect())
                .collect(),
        }
    }
}

impl ValueFunction for ValueFunctionEstimate {
    fn value(&self, i: usize, x: &[f64]) -> f64 {
        self.u(i, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub n: usize,
    pub horizon: f64,
    pub h: f64,
    pub basis_dim: usize,
    pub basis_count: usize,
    pub truncation: f64,
    pub include_terminal: bool,
    pub y0: f64,
    pub z0: Vec<f64>,
    pub u_fits: Vec<FitRecord>,
    /// `v_fits[i − 1][d]`.
    pub v_fits: Vec<Vec<FitRecord>>,
}

/// `(ū_i(x), v̄_i(x))`; at `i = 0` the scalars `(Ȳ₀, Z̄₀)`, at `i = n` `(g(x), 0)`.
pub fn evaluate_solution(estimate: &ValueFunctionEstimate, i: usize, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = estimate.grid.steps();
    if i > n {
        return Err(Error::StepOutOfRange { step: i, n });
    }
    if i > 0 && x.len() != estimate.basis.dim() {
        return Err(Error::InvalidInput(format!("x has {} components, expected {}", x.len(), estimate.basis.dim())));
    }
    Ok((estimate.u(i, x), estimate.v(i, x)))
}

/// Regression diagnostics of one backward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackwardDiagnostics {
    /// Steps whose design matrix was rank-deficient.
    pub rank_deficient_steps: usize,
    pub max_residual_rms_u: f64,
    pub max_residual_rms_v: f64,
}

pub fn backward_pass(
    problem: &FbsdeProblem,
    grid: &Grid,
    paths: &PathEnsemble,
    basis: &BasisSet,
    ridge: f64,
) -> Result<(ValueFunctionEstimate, BackwardDiagnostics)> {
    let n = grid.steps();
    let h = grid.step_size();
    let increments = paths.increments();
    let (lam, dx, dw) = (paths.paths(), problem.dim_x(), problem.dim_w());
    if paths.steps() != n || paths.dim_x() != dx || increments.dim_w() != dw {
        return Err(Error::InvalidInput("path ensemble does not match the problem and grid".into()));
    }
    if basis.dim() != dx {
        return Err(Error::InvalidInput(format!("basis dimension {} differs from dim_x {dx}", basis.dim())));
    }
    let mut diag = BackwardDiagnostics::default();
    let mut u_fits = Vec::with_capacity(n.saturating_sub(1));
    let mut v_fits = Vec::with_capacity(n.saturating_sub(1));

    // Ȳ_n = g(X̄_n)
    let x_n = paths.slice_at(n);
    let mut y_next: Vec<f64> = x_n.par_chunks(dx).map(|x| problem.terminal(x)).collect();
    check_targets(&y_next, n)?;

    for i in (1..n).rev() {
        let x_i = paths.slice_at(i);
        let design = design_matrix(basis, &x_i)?;
        let qr = QrFactorization::new(&design, ridge)?;
        if qr.is_rank_deficient() {
            diag.rank_deficient_steps += 1;
        }
        let mut vs = Vec::with_capacity(dw);
        let mut z = vec![0.0; lam * dw];
        for d in 0..dw {
            let targets: Vec<f64> =
                (0..lam).into_par_iter().map(|p| y_next[p] * increments.get(p, i)[d] / h).collect();
            check_targets(&targets, i)?;
            let fit = qr.solve(&targets)?;
            diag.max_residual_rms_v = diag.max_residual_rms_v.max(fit.residual_rms);
            for (p, v) in design.apply(&fit.coefficients).into_iter().enumerate() {
                z[p * dw + d] = v;
            }
            vs.push(fit);
        }
        let t = grid.time(i);
        let targets: Vec<f64> = (0..lam)
            .into_par_iter()
            .map(|p| {
                let y = y_next[p];
                problem.driver(t, &x_i[p * dx..(p + 1) * dx], y, &z[p * dw..(p + 1) * dw]) * h + y
            })
            .collect();
        check_targets(&targets, i)?;
        let fit = qr.solve(&targets)?;
        diag.max_residual_rms_u = diag.max_residual_rms_u.max(fit.residual_rms);
        y_next = design.apply(&fit.coefficients);
        u_fits.push(fit);
        v_fits.push(vs);
    }
    u_fits.reverse();
    v_fits.reverse();

    // i = 0: every path starts at x0, so plain sample means.
    let mut z0 = vec![0.0; dw];
    for p in 0..lam {
        let w = increments.get(p, 0);
        for d in 0..dw {
            z0[d] += y_next[p] * w[d];
        }
    }
    for v in &mut z0 {
        *v /= lam as f64 * h;
    }
    let x0 = problem.x0();
    let mut y0 = 0.0;
    for (p, &y) in y_next.iter().enumerate() {
        let target = y + problem.driver(0.0, x0, y, &z0) * h;
        if !target.is_finite() {
            return Err(Error::NonFiniteTarget { step: 0, path: p });
        }
        y0 += target;
    }
    y0 /= lam as f64;

    let estimate = ValueFunctionEstimate {
        grid: *grid,
        basis: basis.clone(),
        terminal: problem.terminal_fn(),
        dim_w: dw,
        u_fits,
        v_fits,
        y0,
        z0,
    };
    Ok((estimate, diag))
}

fn check_targets(values: &[f64], step: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(path) => Err(Error::NonFiniteTarget { step, path }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub m: usize,
    pub y0: f64,
    /// `|Ȳ₀^m − Ȳ₀^{m−1}|`.
    pub delta_y0: f64,
    /// `sup |ū^m − ū^{m−1}|` over the probe set, when requested.
    pub function_change: Option<f64>,
    pub rank_deficient_steps: usize,
    pub max_residual_rms_u: f64,
    pub max_residual_rms_v: f64,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub y0_per_iteration: Vec<f64>,
    pub z0_final: Vec<f64>,
    pub m_stop: usize,
    pub stop_reason: StopReason,
    pub iterations: Vec<IterationDiagnostics>,
    pub n: usize,
    pub horizon: f64,
    pub paths: usize,
    pub basis_count: usize,
    pub seed: u64,
    pub ridge: f64,
    pub tol: f64,
    pub m_max: usize,
    pub conditions: Option<ConditionReport>,
}

impl IterationReport {
    pub fn y0(&self) -> f64 {
        *self.y0_per_iteration.last().expect("at least one iteration")
    }

    /// The report with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for it in &mut r.iterations {
            it.wall_clock_seconds = 0.0;
        }
        r
    }
}

/// Output of [`solve`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub estimate: ValueFunctionEstimate,
    pub report: IterationReport,
    /// Increments of the final iteration.
    pub increments: Arc<IncrementSet>,
}

/// Number of paths whose interior states form the function-change probe set.
pub const PROBE_PATHS: usize = 256;

fn function_change(current: &ValueFunctionEstimate, previous: Option<&ValueFunctionEstimate>, paths: &PathEnsemble) -> f64 {
    let n = paths.steps();
    let probes = paths.paths().min(PROBE_PATHS);
    let mut sup = 0.0f64;
    for p in 0..probes {
        for i in 1..n {
            let x = paths.state(p, i);
            let old = previous.map_or(0.0, |e| e.u(i, x));
            sup = sup.max((current.u(i, x) - old).abs());
        }
    }
    sup
}

/// Runs the iteration; `bounds`, when given, are evaluated by the condition checker and recorded.
pub fn solve(
    problem: &FbsdeProblem,
    grid: &Grid,
    config: &SolverConfig,
    bounds: Option<&CoefficientBounds>,
) -> Result<Solution> {
    config.validate()?;
    if (grid.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon() {
        return Err(Error::InvalidInput(format!(
            "grid horizon {} differs from problem horizon {}",
            grid.horizon(),
            problem.horizon()
        )));
    }
    let conditions = match bounds {
        Some(b) => Some(check_conditions(b, grid.horizon(), DEFAULT_SLACK)?),
        None => None,
    };
    let terminal = config.include_terminal.then(|| problem.terminal_fn());
    let basis = make_basis(problem.dim_x(), config.truncation, terminal)?;
    let draw = |m: usize| {
        generate_increments_with_budget(
            grid.steps(),
            problem.dim_w(),
            config.paths,
            grid.step_size(),
            config.iteration_seed(m),
            config.increment_budget,
        )
        .map(Arc::new)
    };
    let mut increments = draw(1)?;
    let mut previous: Option<ValueFunctionEstimate> = None;
    let mut y0s = Vec::new();
    let mut iterations = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;
    for m in 1..=config.m_max {
        let started = Instant::now();
        if config.resample_per_iteration && m > 1 {
            increments = draw(m)?;
        }
        let wrap = |e: Error| Error::Iteration { iteration: m, source: Box::new(e) };
        let u_prev: &dyn ValueFunction = match &previous {
            Some(e) => e,
            None => &ZeroValue,
        };
        let ensemble = forward_paths(problem, grid, u_prev, increments.clone(), m).map_err(wrap)?;
        let (estimate, diag) = backward_pass(problem, grid, &ensemble, &basis, config.ridge).map_err(wrap)?;
        let delta = (estimate.y0 - previous.as_ref().map_or(0.0, |e| e.y0)).abs();
        let change = config
            .stop_on_function_change
            .then(|| function_change(&estimate, previous.as_ref(), &ensemble));
        y0s.push(estimate.y0);
        iterations.push(IterationDiagnostics {
            m,
            y0: estimate.y0,
            delta_y0: delta,
            function_change: change,
            rank_deficient_steps: diag.rank_deficient_steps,
            max_residual_rms_u: diag.max_residual_rms_u,
            max_residual_rms_v: diag.max_residual_rms_v,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        });
        let done = delta < config.tol && change.is_none_or(|c| c < config.tol);
        previous = Some(estimate);
        if done {
            stop_reason = StopReason::Tolerance;
            break;
        }
    }
    let estimate = previous.expect("m_max >= 1");
    let report = IterationReport {
        z0_final: estimate.z0.clone(),
        m_stop: y0s.len(),
        y0_per_iteration: y0s,
        stop_reason,
        iterations,
        n: grid.steps(),
        horizon: grid.horizon(),
        paths: config.paths,
        basis_count: basis.count(),
        seed: config.seed,
        ridge: config.ridge,
        tol: config.tol,
        m_max: config.m_max,
        conditions,
    };
    Ok(Solution { estimate, report, increments })
}

/// `(X̄, Ȳ, Z̄)` along every path under a fixed estimate.
#[derive(Debug, Clone)]
pub struct SolutionPaths {
    pub ensemble: PathEnsemble,
    /// `y[λ·(n+1) + i]`.
    pub y: Vec<f64>,
    /// `z[(λ·(n+1) + i)·d_w + d]`.
    pub z: Vec<f64>,
}

impl SolutionPaths {
    pub fn y(&self, path: usize, i: usize) -> f64 {
        self.y[path * (self.ensemble.steps() + 1) + i]
    }

    pub fn z(&self, path: usize, i: usize) -> &[f64] {
        let dw = self.z.len() / (self.ensemble.paths() * (self.ensemble.steps() + 1));
        let at = (path * (self.ensemble.steps() + 1) + i) * dw;
        &self.z[at..at + dw]
    }
}

/// Re-runs the forward pass under `estimate` and tabulates `Ȳ_i = ū_i(X̄_i)`, `Z̄_i = v̄_i(X̄_i)`.
pub fn simulate_solution_paths(
    problem: &FbsdeProblem,
    grid: &Grid,
    estimate: &ValueFunctionEstimate,
    increments: Arc<IncrementSet>,
) -> Result<SolutionPaths> {
    if estimate.grid.steps() != grid.steps() || estimate.basis.dim() != problem.dim_x() {
        return Err(Error::InvalidInput("estimate was produced on an incompatible grid or problem".into()));
    }
    let ensemble = forward_paths(problem, grid, estimate, increments, 0)?;
    let n = grid.steps();
    let dw = problem.dim_w();
    let per = n + 1;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..ensemble.paths())
        .into_par_iter()
        .map(|p| {
            let mut y = Vec::with_capacity(per);
            let mut z = Vec::with_capacity(per * dw);
            for i in 0..=n {
                let x = ensemble.state(p, i);
                y.push(estimate.u(i, x));
                z.extend(estimate.v(i, x));
            }
            (y, z)
        })
        .collect();
    let mut y = Vec::with_capacity(rows.len() * per);
    let mut z = Vec::with_capacity(rows.len() * per * dw);
    for (ry, rz) in rows {
        y.extend(ry);
        z.extend(rz);
    }
    Ok(SolutionPaths { ensemble, y, z })
}
