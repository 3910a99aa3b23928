//! Quadratic Lipschitz basis and least squares by pivoted Householder QR.
//!
//! The basis is `1`, `x_d`, and `clamp(x_d x_q, −R, R)` for `d ≤ q`, with the
//! terminal function optionally appended. Least squares uses Householder QR
//! with column pivoting. Columns whose remaining norm falls to
//! `ε · max(Λ, K) · |R₀₀|` or below are declared dependent, and the
//! minimum-norm minimizer is then recovered from a complete orthogonal
//! decomposition. One factorization serves any number of right-hand sides.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TerminalFn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFunction {
    Constant,
    Coordinate(usize),
    /// `clamp(x_d · x_q, −R, R)` with `d ≤ q`.
    ClampedProduct(usize, usize),
    Terminal,
}

#[derive(Clone)]
pub struct BasisSet {
    dim: usize,
    truncation: f64,
    functions: Vec<BasisFunction>,
    terminal: Option<Arc<TerminalFn>>,
}

impl std::fmt::Debug for BasisSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BasisSet")
            .field("dim", &self.dim)
            .field("truncation", &self.truncation)
            .field("count", &self.count())
            .field("include_terminal", &self.include_terminal())
            .finish()
    }
}

/// `1 + D + D(D+1)/2`, plus one with the terminal function.
pub fn basis_count(dim: usize, include_terminal: bool) -> usize {
    1 + dim + dim * (dim + 1) / 2 + usize::from(include_terminal)
}

pub fn make_basis(dim: usize, truncation: f64, terminal: Option<Arc<TerminalFn>>) -> Result<BasisSet> {
    if dim == 0 {
        return Err(Error::InvalidArgument("basis dimension must be at least 1".into()));
    }
    if !(truncation > 0.0) {
        return Err(Error::InvalidArgument(format!("truncation R must be positive, got {truncation}")));
    }
    let mut functions = Vec::with_capacity(basis_count(dim, terminal.is_some()));
    functions.push(BasisFunction::Constant);
    functions.extend((0..dim).map(BasisFunction::Coordinate));
    for d in 0..dim {
        functions.extend((d..dim).map(|q| BasisFunction::ClampedProduct(d, q)));
    }
    if terminal.is_some() {
        functions.push(BasisFunction::Terminal);
    }
    Ok(BasisSet { dim, truncation, functions, terminal })
}

impl BasisSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn count(&self) -> usize {
        self.functions.len()
    }

    pub fn include_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn eval_one(&self, k: usize, x: &[f64]) -> f64 {
        match self.functions[k] {
            BasisFunction::Constant => 1.0,
            BasisFunction::Coordinate(d) => x[d],
            BasisFunction::ClampedProduct(d, q) => (x[d] * x[q]).clamp(-self.truncation, self.truncation),
            BasisFunction::Terminal => (self.terminal.as_ref().expect("terminal basis function"))(x),
        }
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.eval_one(k, x);
        }
    }

    /// Lipschitz constant of each function on the box `[−ρ, ρ]^D`.
    ///
    /// Cross products `x_d x_q` (`d ≠ q`) are Lipschitz only locally, so the
    /// bound needs the box. `terminal_lipschitz` is the constant of `g`.
    pub fn lipschitz_constants(&self, radius: f64, terminal_lipschitz: f64) -> Vec<f64> {
        self.functions
            .iter()
            .map(|f| match *f {
                BasisFunction::Constant => 0.0,
                BasisFunction::Coordinate(_) => 1.0,
                BasisFunction::ClampedProduct(d, q) if d == q => 2.0 * radius.min(self.truncation.sqrt()),
                BasisFunction::ClampedProduct(..) => std::f64::consts::SQRT_2 * radius,
                BasisFunction::Terminal => terminal_lipschitz,
            })
            .collect()
    }
}

/// Column-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_columns(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "{} entries do not form a {rows} x {cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.data[k * self.rows..(k + 1) * self.rows]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        (0..self.cols).map(|k| self.get(row, k)).collect()
    }

    /// `A c`.
    pub fn apply(&self, coefficients: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (k, c) in coefficients.iter().enumerate() {
            if *c != 0.0 {
                axpy(*c, self.column(k), &mut out);
            }
        }
        out
    }
}

/// Evaluates the basis at `Λ` points given path-major (`Λ × D`).
pub fn design_matrix(basis: &BasisSet, points: &[f64]) -> Result<DesignMatrix> {
    let dim = basis.dim();
    if !points.len().is_multiple_of(dim) {
        return Err(Error::InvalidInput(format!("{} coordinates are not a multiple of D = {dim}", points.len())));
    }
    let rows = points.len() / dim;
    let cols = basis.count();
    let mut data = vec![0.0; rows * cols];
    let bad: Vec<Option<usize>> = data
        .par_chunks_mut(rows.max(1))
        .take(cols)
        .enumerate()
        .map(|(k, col)| {
            let mut first = None;
            for (r, v) in col.iter_mut().enumerate() {
                *v = basis.eval_one(k, &points[r * dim..(r + 1) * dim]);
                if first.is_none() && !v.is_finite() {
                    first = Some(r);
                }
            }
            first
        })
        .collect();
    if let Some((row, column)) = bad.iter().enumerate().filter_map(|(k, r)| r.map(|r| (r, k))).min() {
        return Err(Error::NonFiniteBasis { row, column });
    }
    Ok(DesignMatrix { rows, cols, data })
}

/// `Σ coefficients_k η_k(x)`.
pub fn evaluate_fit(basis: &BasisSet, coefficients: &[f64], x: &[f64]) -> f64 {
    coefficients
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(k, c)| c * basis.eval_one(k, x))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub coefficients: Vec<f64>,
    pub residual_rms: f64,
    pub rank_deficient: bool,
    /// Numerical rank of the (ridge-augmented) design.
    pub rank: usize,
}

/// Serialized form of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub step_index: usize,
    pub coefficients: Vec<f64>,
    pub residual_rms: f64,
    pub rank_deficient: bool,
}

impl FitRecord {
    pub fn new(step_index: usize, fit: &RegressionFit) -> Self {
        Self {
            step_index,
            coefficients: fit.coefficients.clone(),
            residual_rms: fit.residual_rms,
            rank_deficient: fit.rank_deficient,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn norm(a: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let inv = 1.0 / scale;
    let mut acc = [0.0; 4];
    let chunks = a.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().map(|v| (v * inv) * (v * inv)).sum();
    for c in chunks {
        for (s, v) in acc.iter_mut().zip(c) {
            *s += (v * inv) * (v * inv);
        }
    }
    scale * ((acc[0] + acc[1]) + (acc[2] + acc[3]) + tail).sqrt()
}

/// Householder reflector for `x`: overwrites `x` with `(β, v₂, …)` and returns `τ`
/// such that `(I − τ v vᵀ) x = β e₁` with `v₁ = 1`.
fn householder(x: &mut [f64]) -> f64 {
    let alpha = x[0];
    let xnorm = norm(&x[1..]);
    if xnorm == 0.0 {
        return 0.0;
    }
    let beta = -alpha.signum() * alpha.hypot(xnorm);
    let scale = 1.0 / (alpha - beta);
    for v in &mut x[1..] {
        *v *= scale;
    }
    x[0] = beta;
    (beta - alpha) / beta
}

/// Applies `I − τ v vᵀ` (with `v = (1, tail)`) to `y`.
fn reflect(tau: f64, tail: &[f64], y: &mut [f64]) {
    if tau == 0.0 {
        return;
    }
    let (head, rest) = y.split_first_mut().expect("nonempty");
    let w = tau * (*head + dot(tail, rest));
    *head -= w;
    axpy(-w, tail, rest);
}

/// Pivoted QR of a design matrix, optionally augmented with `√(Λ·ridge) I`.
#[derive(Debug, Clone)]
pub struct QrFactorization<'a> {
    design: &'a DesignMatrix,
    /// Augmented row count.
    m: usize,
    k: usize,
    qr: Vec<f64>,
    tau: Vec<f64>,
    perm: Vec<usize>,
    rank: usize,
    /// Complete orthogonal decomposition of `[R11 R12]` when rank-deficient.
    cod: Option<(Vec<f64>, Vec<f64>)>,
}

impl<'a> QrFactorization<'a> {
    pub fn new(design: &'a DesignMatrix, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge must be nonnegative, got {ridge}")));
        }
        if design.rows() == 0 {
            return Err(Error::InvalidArgument("least squares needs at least one row".into()));
        }
        let (rows, k) = (design.rows(), design.cols());
        let extra = if ridge > 0.0 { k } else { 0 };
        let m = rows + extra;
        let mut qr = vec![0.0; m * k];
        let penalty = (rows as f64 * ridge).sqrt();
        for j in 0..k {
            qr[j * m..j * m + rows].copy_from_slice(design.column(j));
            if extra > 0 {
                qr[j * m + rows + j] = penalty;
            }
        }
        let mut perm: Vec<usize> = (0..k).collect();
        let mut vn1: Vec<f64> = (0..k).map(|j| norm(&qr[j * m..(j + 1) * m])).collect();
        let mut vn2 = vn1.clone();
        let steps = m.min(k);
        let mut tau = Vec::with_capacity(steps);
        let threshold_factor = f64::EPSILON * m.max(k) as f64;
        let downdate_tol = f64::EPSILON.sqrt();
        let mut r00 = 0.0;
        let mut rank = 0;
        for s in 0..steps {
            let p = (s..k).fold(s, |best, j| if vn1[j] > vn1[best] { j } else { best });
            if p != s {
                for r in 0..m {
                    qr.swap(s * m + r, p * m + r);
                }
                perm.swap(s, p);
                vn1.swap(s, p);
                vn2.swap(s, p);
            }
            let pivot = norm(&qr[s * m + s..(s + 1) * m]);
            if s == 0 {
                r00 = pivot;
            }
            if pivot == 0.0 || pivot <= threshold_factor * r00 {
                break;
            }
            let (done, trailing) = qr.split_at_mut((s + 1) * m);
            let col = &mut done[s * m + s..];
            let t = householder(col);
            let tail = &col[1..];
            for j in 0..k - s - 1 {
                let y = &mut trailing[j * m + s..(j + 1) * m];
                reflect(t, tail, y);
                let jj = s + 1 + j;
                if vn1[jj] != 0.0 {
                    let ratio = y[0].abs() / vn1[jj];
                    let temp = (1.0 - ratio * ratio).max(0.0);
                    let temp2 = temp * (vn1[jj] / vn2[jj]).powi(2);
                    if temp2 <= downdate_tol {
                        vn1[jj] = norm(&y[1..]);
                        vn2[jj] = vn1[jj];
                    } else {
                        vn1[jj] *= temp.sqrt();
                    }
                }
            }
            tau.push(t);
            rank = s + 1;
        }
        tau.truncate(rank);
        let mut f = Self { design, m, k, qr, tau, perm, rank, cod: None };
        if rank < k && rank > 0 {
            f.cod = Some(f.orthogonal_complement());
        }
        Ok(f)
    }

    /// QR of `[R11 R12]ᵀ` (`k × r`), giving `[R11 R12] = T̃ᵀ Q̃ᵀ`.
    fn orthogonal_complement(&self) -> (Vec<f64>, Vec<f64>) {
        let (k, r, m) = (self.k, self.rank, self.m);
        let mut rt = vec![0.0; k * r];
        for s in 0..r {
            for j in s..k {
                rt[s * k + j] = self.qr[j * m + s];
            }
        }
        let mut tau = Vec::with_capacity(r);
        for s in 0..r {
            let (done, trailing) = rt.split_at_mut((s + 1) * k);
            let col = &mut done[s * k + s..];
            let t = householder(col);
            let tail = &col[1..];
            for j in 0..r - s - 1 {
                reflect(t, tail, &mut trailing[j * k + s..(j + 1) * k]);
            }
            tau.push(t);
        }
        (rt, tau)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.k
    }

    /// Minimum-norm least-squares coefficients for `targets`.
    pub fn coefficients(&self, targets: &[f64]) -> Result<Vec<f64>> {
        let rows = self.design.rows();
        if targets.len() != rows {
            return Err(Error::InvalidInput(format!("{} targets for {rows} design rows", targets.len())));
        }
        if let Some(i) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite regression target at row {i}")));
        }
        let (m, k, r) = (self.m, self.k, self.rank);
        let mut b = vec![0.0; m];
        b[..rows].copy_from_slice(targets);
        for s in 0..r {
            let col = &self.qr[s * m + s..(s + 1) * m];
            reflect(self.tau[s], &col[1..], &mut b[s..]);
        }
        let rr = |i: usize, j: usize| self.qr[j * m + i];
        let mut y = vec![0.0; k];
        match &self.cod {
            None => {
                for i in (0..r).rev() {
                    let mut acc = b[i];
                    for j in i + 1..r {
                        acc -= rr(i, j) * y[j];
                    }
                    y[i] = acc / rr(i, i);
                }
            }
            Some((rt, tau)) => {
                // T̃ᵀ w = c, T̃ upper triangular stored in rt (k × r).
                let t = |i: usize, j: usize| rt[j * k + i];
                for i in 0..r {
                    let mut acc = b[i];
                    for j in 0..i {
                        acc -= t(j, i) * y[j];
                    }
                    y[i] = acc / t(i, i);
                }
                for s in (0..r).rev() {
                    let col = &rt[s * k + s..(s + 1) * k];
                    reflect(tau[s], &col[1..], &mut y[s..]);
                }
            }
        }
        let mut coefficients = vec![0.0; k];
        for (j, v) in y.into_iter().enumerate() {
            coefficients[self.perm[j]] = v;
        }
        Ok(coefficients)
    }

    pub fn solve(&self, targets: &[f64]) -> Result<RegressionFit> {
        let coefficients = self.coefficients(targets)?;
        let fitted = self.design.apply(&coefficients);
        let ss: f64 = fitted.iter().zip(targets).map(|(f, t)| (t - f) * (t - f)).sum();
        Ok(RegressionFit {
            coefficients,
            residual_rms: (ss / targets.len() as f64).sqrt(),
            rank_deficient: self.is_rank_deficient(),
            rank: self.rank,
        })
    }
}

/// Minimizer of `(1/Λ) Σ |target − Σ c_k η_k|² + ridge |c|²` (minimum-norm when not unique).
pub fn fit_least_squares(design: &DesignMatrix, targets: &[f64], ridge: f64) -> Result<RegressionFit> {
    QrFactorization::new(design, ridge)?.solve(targets)
}
