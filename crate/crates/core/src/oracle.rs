//! Reference solutions.
//!
//! * A one-dimensional quadrature oracle: the Markovian iteration with every
//!   conditional expectation computed by Gauss-Hermite quadrature on a
//!   uniform spatial grid, iterated to its fixed point.
//! * The closed-form sine benchmark `u(t, x) = e^{−r(T−t)} Σ sin x_d` and its
//!   decoupled Euler reference paths on the solver's own increments.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FbsdeProblem, Grid, SineParams};
use crate::paths::IncrementSet;
use crate::solver::{simulate_solution_paths, solve, IterationReport, SolverConfig, StopReason};

/// Nodes and weights with `Σ w_k F(ξ_k) ≈ E F(ξ)`, `ξ ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Physicists' rule for the `e^{−x²}` weight, rescaled to the standard
    /// normal density and sorted by node.
    pub fn new(order: usize) -> Result<Self> {
        let order = std::num::NonZeroUsize::new(order)
            .ok_or_else(|| Error::InvalidArgument("quadrature order must be positive".into()))?;
        let rule = gauss_quad::GaussHermite::new(order);
        let mut pairs: Vec<(f64, f64)> = rule
            .iter()
            .map(|(x, w)| (x * std::f64::consts::SQRT_2, w / std::f64::consts::PI.sqrt()))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (nodes, weights) = pairs.into_iter().unzip();
        Ok(Self { nodes, weights })
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}

/// `u_i`, `v_i` tabulated on a uniform grid of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    x_lo: f64,
    x_hi: f64,
    nodes: usize,
    /// `u[i·nodes + j]`.
    u: Vec<f64>,
    v: Vec<f64>,
}

impl GridFunction {
    fn zeros(grid: Grid, x_lo: f64, x_hi: f64, nodes: usize) -> Self {
        let len = (grid.steps() + 1) * nodes;
        Self { grid, x_lo, x_hi, nodes, u: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn node(&self, j: usize) -> f64 {
        if j + 1 == self.nodes {
            self.x_hi
        } else {
            self.x_lo + j as f64 * self.spacing()
        }
    }

    pub fn x_nodes(&self) -> Vec<f64> {
        (0..self.nodes).map(|j| self.node(j)).collect()
    }

    fn spacing(&self) -> f64 {
        (self.x_hi - self.x_lo) / (self.nodes - 1) as f64
    }

    pub fn u_values(&self, i: usize) -> &[f64] {
        &self.u[i * self.nodes..(i + 1) * self.nodes]
    }

    pub fn v_values(&self, i: usize) -> &[f64] {
        &self.v[i * self.nodes..(i + 1) * self.nodes]
    }

    fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        if x <= self.x_lo {
            return values[0];
        }
        if x >= self.x_hi {
            return values[self.nodes - 1];
        }
        let s = (x - self.x_lo) / self.spacing();
        let j = (s.floor() as usize).min(self.nodes - 2);
        let frac = s - j as f64;
        values[j] + frac * (values[j + 1] - values[j])
    }

    /// Linear interpolation, constant beyond the grid ends.
    pub fn u(&self, i: usize, x: f64) -> f64 {
        self.interpolate(self.u_values(i), x)
    }

    pub fn v(&self, i: usize, x: f64) -> f64 {
        self.interpolate(self.v_values(i), x)
    }

    /// `max |u − other.u|` over every step and node.
    pub fn sup_distance(&self, other: &GridFunction) -> f64 {
        self.u.iter().zip(&other.u).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// CSV with header `i,t_i,x,u,v`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "i,t_i,x,u,v")?;
        for i in 0..=self.grid.steps() {
            let t = self.grid.time(i);
            for j in 0..self.nodes {
                writeln!(
                    out,
                    "{i},{t:.16e},{:.16e},{:.16e},{:.16e}",
                    self.node(j),
                    self.u[i * self.nodes + j],
                    self.v[i * self.nodes + j]
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub x_lo: f64,
    pub x_hi: f64,
    /// Odd counts put the grid midpoint on a node.
    pub nodes: usize,
    pub quad_order: usize,
    pub inner_tol: f64,
    pub inner_max: usize,
}

impl Default for OracleConfig {
    /// The sine benchmark window `[π/2 − 2, π/2 + 2]`.
    fn default() -> Self {
        let mid = std::f64::consts::FRAC_PI_2;
        Self { x_lo: mid - 2.0, x_hi: mid + 2.0, nodes: 2001, quad_order: 32, inner_tol: 1e-10, inner_max: 200 }
    }
}

/// Nodes closer than `4 σ_max √T` to either end feel the constant extrapolation.
pub fn boundary_margin(sigma_max: f64, horizon: f64) -> f64 {
    4.0 * sigma_max * horizon.sqrt()
}

/// One application of the iteration map with exact (quadrature) expectations:
/// the forward step from node `x` at time `t_i` uses `φ_i(x)`.
pub fn apply_operator(problem: &FbsdeProblem, phi: &GridFunction, quad: &GaussHermite) -> GridFunction {
    let grid = phi.grid;
    let (n, h) = (grid.steps(), grid.step_size());
    let root_h = h.sqrt();
    let mut out = GridFunction::zeros(grid, phi.x_lo, phi.x_hi, phi.nodes);
    let xs = phi.x_nodes();
    for (j, x) in xs.iter().enumerate() {
        out.u[n * phi.nodes + j] = problem.terminal(&[*x]);
    }
    for i in (0..n).rev() {
        let t = grid.time(i);
        let next = out.u_values(i + 1).to_vec();
        let rows: Vec<(f64, f64)> = xs
            .par_iter()
            .enumerate()
            .map(|(j, &x)| {
                let y_prev = phi.u[i * phi.nodes + j];
                let (mut b, mut s) = ([0.0], [0.0]);
                problem.drift(t, &[x], y_prev, &mut b);
                problem.diffusion(t, &[x], y_prev, &mut s);
                let ys: Vec<f64> = quad
                    .nodes
                    .iter()
                    .map(|xi| out.interpolate(&next, x + b[0] * h + s[0] * root_h * xi))
                    .collect();
                let psi = ys.iter().zip(&quad.nodes).zip(&quad.weights).map(|((y, xi), w)| w * y * xi).sum::<f64>()
                    / root_h;
                let u = ys
                    .iter()
                    .zip(&quad.weights)
                    .map(|(y, w)| w * (y + problem.driver(t, &[x], *y, &[psi]) * h))
                    .sum();
                (u, psi)
            })
            .collect();
        for (j, (u, v)) in rows.into_iter().enumerate() {
            out.u[i * phi.nodes + j] = u;
            out.v[i * phi.nodes + j] = v;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub function: GridFunction,
    pub sweeps: usize,
    pub last_change: f64,
}

/// Iterates [`apply_operator`] from `φ ≡ 0` until the sup-norm change drops below `inner_tol`.
pub fn quadrature_fixed_point(problem: &FbsdeProblem, grid: &Grid, config: &OracleConfig) -> Result<OracleSolution> {
    if problem.dim_x() != 1 || problem.dim_w() != 1 {
        return Err(Error::InvalidArgument("the quadrature oracle is one-dimensional".into()));
    }
    if !(config.x_lo < config.x_hi) || config.nodes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need x_lo < x_hi and at least two nodes (got [{}, {}], {})",
            config.x_lo, config.x_hi, config.nodes
        )));
    }
    if config.quad_order < 8 {
        return Err(Error::InvalidArgument(format!("quadrature order must be at least 8, got {}", config.quad_order)));
    }
    let quad = GaussHermite::new(config.quad_order)?;
    let mut phi = GridFunction::zeros(*grid, config.x_lo, config.x_hi, config.nodes);
    let mut change = f64::INFINITY;
    for sweep in 1..=config.inner_max {
        let next = apply_operator(problem, &phi, &quad);
        change = next.sup_distance(&phi);
        phi = next;
        if !change.is_finite() {
            break;
        }
        if change < config.inner_tol {
            return Ok(OracleSolution { function: phi, sweeps: sweep, last_change: change });
        }
    }
    Err(Error::OracleNotConverged { iterations: config.inner_max, last_change: change })
}

/// Decoupled Euler reference `(X̌, Y̌)` for the sine benchmark.
#[derive(Debug, Clone)]
pub struct ReferencePaths {
    pub steps: usize,
    pub dim: usize,
    /// `x[(λ·(n+1) + i)·D + d]`.
    pub x: Vec<f64>,
    /// `y[λ·(n+1) + i]`.
    pub y: Vec<f64>,
}

impl ReferencePaths {
    pub fn state(&self, path: usize, i: usize) -> &[f64] {
        let at = (path * (self.steps + 1) + i) * self.dim;
        &self.x[at..at + self.dim]
    }

    pub fn y(&self, path: usize, i: usize) -> f64 {
        self.y[path * (self.steps + 1) + i]
    }
}

/// `X̌_{i+1} = X̌_i + σ u(t_i, X̌_i) ΔW_{i+1}` with the closed-form `u`, and `Y̌_i = u(t_i, X̌_i)`.
pub fn sine_reference_paths(params: &SineParams, grid: &Grid, increments: &IncrementSet) -> Result<ReferencePaths> {
    let d = params.dim;
    if increments.dim_w() != d || increments.steps() != grid.steps() {
        return Err(Error::InvalidInput(format!(
            "increments ({} components, {} steps) do not match D = {d}, n = {}",
            increments.dim_w(),
            increments.steps(),
            grid.steps()
        )));
    }
    let n = grid.steps();
    let per = n + 1;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..increments.paths())
        .into_par_iter()
        .map(|p| {
            let mut x = vec![params.x0; per * d];
            let mut y = vec![0.0; per];
            for i in 0..n {
                let (done, rest) = x.split_at_mut((i + 1) * d);
                let cur = &done[i * d..];
                let u = params.exact_value(grid.time(i), cur);
                y[i] = u;
                let vol = params.sigma * u;
                let w = increments.get(p, i);
                for k in 0..d {
                    rest[k] = cur[k] + vol * w[k];
                }
            }
            y[n] = params.exact_value(grid.time(n), &x[n * d..]);
            (x, y)
        })
        .collect();
    let mut x = Vec::with_capacity(rows.len() * per * d);
    let mut y = Vec::with_capacity(rows.len() * per);
    for (rx, ry) in rows {
        x.extend(rx);
        y.extend(ry);
    }
    Ok(ReferencePaths { steps: n, dim: d, x, y })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub dim: usize,
    pub sigma: f64,
    pub r: f64,
    pub y0_estimate: f64,
    pub y0_exact: f64,
    pub abs_error: f64,
    /// `(1/Λ) Σ_λ |Ȳ_i − Y̌_i|²` for `i = 0..=n`.
    pub mse_curve: Vec<f64>,
    pub m_stop: usize,
    pub stop_reason: StopReason,
    pub report: IterationReport,
}

pub fn run_sine_benchmark(params: &SineParams, grid: &Grid, config: &SolverConfig) -> Result<BenchmarkResult> {
    let problem = params.problem()?;
    let solution = solve(&problem, grid, config, Some(&params.bounds()))?;
    let increments: Arc<IncrementSet> = solution.increments.clone();
    let sim = simulate_solution_paths(&problem, grid, &solution.estimate, increments.clone())?;
    let reference = sine_reference_paths(params, grid, &increments)?;
    let n = grid.steps();
    let paths = increments.paths();
    let mse_curve = (0..=n)
        .map(|i| (0..paths).map(|p| (sim.y(p, i) - reference.y(p, i)).powi(2)).sum::<f64>() / paths as f64)
        .collect();
    let y0_estimate = solution.report.y0();
    let y0_exact = params.exact_y0();
    Ok(BenchmarkResult {
        dim: params.dim,
        sigma: params.sigma,
        r: params.r,
        y0_estimate,
        y0_exact,
        abs_error: (y0_estimate - y0_exact).abs(),
        mse_curve,
        m_stop: solution.report.m_stop,
        stop_reason: solution.report.stop_reason,
        report: solution.report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    /// Mean over seeds of `|Ȳ₀ − Y₀|`.
    pub abs_error: f64,
    /// `|mean over seeds of Ȳ₀ − Y₀|`.
    pub bias: f64,
    /// Mean `m_stop` over seeds.
    pub m_stop: f64,
    pub y0_per_seed: Vec<f64>,
    pub stop_reasons: Vec<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `ln abs_error` against `ln n`; absent with fewer than two usable rows.
    pub slope: Option<f64>,
}

/// Least-squares slope of `ln y` on `ln x`; `None` unless at least two positive pairs.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 || pts.len() != points.len() {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Runs the benchmark for every `n` and every seed; `config.seed` is replaced by each entry of `seeds`.
pub fn convergence_study_n(
    params: &SineParams,
    n_list: &[usize],
    seeds: &[u64],
    config: &SolverConfig,
) -> Result<ConvergenceStudy> {
    if n_list.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one n and one seed".into()));
    }
    let problem = params.problem()?;
    let exact = params.exact_y0();
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = Grid::new(params.horizon, n)?;
        let mut y0s = Vec::with_capacity(seeds.len());
        let mut reasons = Vec::with_capacity(seeds.len());
        let mut m_total = 0usize;
        for &seed in seeds {
            let cfg = SolverConfig { seed, ..config.clone() };
            let s = solve(&problem, &grid, &cfg, None)?;
            y0s.push(s.report.y0());
            reasons.push(s.report.stop_reason);
            m_total += s.report.m_stop;
        }
        let k = seeds.len() as f64;
        rows.push(ConvergenceRow {
            n,
            abs_error: y0s.iter().map(|y| (y - exact).abs()).sum::<f64>() / k,
            bias: (y0s.iter().sum::<f64>() / k - exact).abs(),
            m_stop: m_total as f64 / k,
            y0_per_seed: y0s,
            stop_reasons: reasons,
        });
    }
    let slope = log_log_slope(&rows.iter().map(|r| (r.n as f64, r.abs_error)).collect::<Vec<_>>());
    Ok(ConvergenceStudy { rows, slope })
}

/// Solver against quadrature oracle on a one-dimensional problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub oracle_u0: f64,
    pub oracle_sweeps: usize,
    pub solver_y0: Vec<f64>,
    pub solver_mean: f64,
    /// Sample standard deviation of the solver's `Ȳ₀` across seeds.
    pub solver_sd: f64,
    pub difference: f64,
    pub allowed: f64,
    pub agrees: bool,
}

/// Oracle grid error budget added to the Monte Carlo band.
pub const ORACLE_BUDGET: f64 = 1e-4;

pub fn compare_with_oracle(
    problem: &FbsdeProblem,
    grid: &Grid,
    seeds: &[u64],
    config: &SolverConfig,
    oracle: &OracleConfig,
) -> Result<OracleComparison> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("need at least two seeds for a spread estimate".into()));
    }
    let reference = quadrature_fixed_point(problem, grid, oracle)?;
    let oracle_u0 = reference.function.u(0, problem.x0()[0]);
    let mut solver_y0 = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let s = solve(problem, grid, &SolverConfig { seed, ..config.clone() }, None)?;
        solver_y0.push(s.report.y0());
    }
    let k = solver_y0.len() as f64;
    let solver_mean = solver_y0.iter().sum::<f64>() / k;
    let solver_sd = (solver_y0.iter().map(|y| (y - solver_mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    let difference = (solver_mean - oracle_u0).abs();
    let allowed = 3.0 * solver_sd + ORACLE_BUDGET;
    Ok(OracleComparison {
        oracle_u0,
        oracle_sweeps: reference.sweeps,
        solver_y0,
        solver_mean,
        solver_sd,
        difference,
        allowed,
        agrees: difference <= allowed,
    })
}
