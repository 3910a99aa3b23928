//! Brownian increments and the forward Euler pass.
//!
//! Increments are drawn from a counter-based generator: entry `(λ, i, d)` is
//! a pure function of `(seed, λ, i, d)`, so generation order and worker count
//! never change a single bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{FbsdeProblem, Grid};

/// Default cap on the number of stored increment entries (`Λ · n · d_w`), about 800 MB.
pub const DEFAULT_INCREMENT_BUDGET: usize = 100_000_000;

/// `ΔW` for `Λ` paths, `n` steps and `d_w` components.
///
/// `data[(λ·n + i)·d_w + d]` holds `ΔW_{i+1}` of path `λ`, component `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementSet {
    data: Vec<f64>,
    steps: usize,
    dim_w: usize,
    paths: usize,
    h: f64,
    seed: u64,
}

impl IncrementSet {
    /// Wraps externally supplied increments laid out as `data[(λ·n + i)·d_w + d]`.
    pub fn from_data(n: usize, dim_w: usize, paths: usize, h: f64, seed: u64, data: Vec<f64>) -> Result<Self> {
        if n == 0 || dim_w == 0 || paths == 0 || data.len() != n * dim_w * paths {
            return Err(Error::InvalidInput(format!(
                "{} increments do not match n = {n}, d_w = {dim_w}, paths = {paths}",
                data.len()
            )));
        }
        if !(h > 0.0 && h.is_finite()) || data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("increments and step size must be finite, h > 0".into()));
        }
        Ok(Self { data, steps: n, dim_w, paths, h, seed })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim_w(&self) -> usize {
        self.dim_w
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `ΔW_{i+1}` of path `λ` (all components).
    pub fn get(&self, path: usize, i: usize) -> &[f64] {
        let start = (path * self.steps + i) * self.dim_w;
        &self.data[start..start + self.dim_w]
    }

    /// Every increment of path `λ`, step-major.
    pub fn path(&self, path: usize) -> &[f64] {
        let len = self.steps * self.dim_w;
        &self.data[path * len..(path + 1) * len]
    }
}

fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn standard_normal() -> Normal {
    Normal::standard()
}

fn path_generator(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// The single increment `ΔW_{i+1}` of path `λ`, component `d`, computed in isolation.
pub fn increment_at(seed: u64, path: usize, i: usize, d: usize, dim_w: usize, h: f64) -> f64 {
    let mut rng = path_generator(seed, path);
    rng.set_word_pos(2 * ((i * dim_w + d) as u128));
    standard_normal().inverse_cdf(unit_open(rng.next_u64())) * h.sqrt()
}

/// [`generate_increments_with_budget`] with [`DEFAULT_INCREMENT_BUDGET`].
pub fn generate_increments(n: usize, dim_w: usize, paths: usize, h: f64, seed: u64) -> Result<IncrementSet> {
    generate_increments_with_budget(n, dim_w, paths, h, seed, DEFAULT_INCREMENT_BUDGET)
}

pub fn generate_increments_with_budget(
    n: usize,
    dim_w: usize,
    paths: usize,
    h: f64,
    seed: u64,
    budget: usize,
) -> Result<IncrementSet> {
    if n == 0 || dim_w == 0 || paths == 0 {
        return Err(Error::InvalidArgument(format!(
            "n, d_w and the path count must be at least 1 (got {n}, {dim_w}, {paths})"
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let requested = paths
        .checked_mul(n)
        .and_then(|v| v.checked_mul(dim_w))
        .unwrap_or(usize::MAX);
    if requested > budget {
        return Err(Error::Capacity { requested, budget });
    }
    let len = n * dim_w;
    let scale = h.sqrt();
    let normal = standard_normal();
    let mut data = vec![0.0; requested];
    data.par_chunks_mut(len).enumerate().for_each(|(path, chunk)| {
        // Word position 2·(i·d_w + d) is read sequentially along the stream.
        let mut rng = path_generator(seed, path);
        for v in chunk.iter_mut() {
            *v = normal.inverse_cdf(unit_open(rng.next_u64())) * scale;
        }
    });
    Ok(IncrementSet { data, steps: n, dim_w, paths, h, seed })
}

/// The previous iterate `ū_i(x)` read by the forward pass.
pub trait ValueFunction: Sync {
    fn value(&self, i: usize, x: &[f64]) -> f64;
}

impl<F> ValueFunction for F
where
    F: Fn(usize, &[f64]) -> f64 + Sync,
{
    fn value(&self, i: usize, x: &[f64]) -> f64 {
        self(i, x)
    }
}

/// `ū ≡ 0`, the starting point of the iteration.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroValue;

impl ValueFunction for ZeroValue {
    fn value(&self, _i: usize, _x: &[f64]) -> f64 {
        0.0
    }
}

/// Forward states `X̄_i` of every path.
///
/// `states[(λ·(n+1) + i)·dim_x + d]`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    states: Vec<f64>,
    steps: usize,
    paths: usize,
    dim_x: usize,
    iteration: usize,
    increments: Arc<IncrementSet>,
}

impl PathEnsemble {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    /// Iteration index `m` whose previous iterate drove this ensemble.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn increments(&self) -> &Arc<IncrementSet> {
        &self.increments
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, path: usize, i: usize) -> &[f64] {
        let start = (path * (self.steps + 1) + i) * self.dim_x;
        &self.states[start..start + self.dim_x]
    }

    /// States of every path at step `i`, path-major (`Λ × dim_x`).
    pub fn slice_at(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.paths * self.dim_x);
        for p in 0..self.paths {
            out.extend_from_slice(self.state(p, i));
        }
        out
    }
}

/// One Euler pass `X_{i+1} = X_i + b(t_i, X_i, y)h + σ(t_i, X_i, y)ΔW_{i+1}` with `y = ū_i(X_i)`.
pub fn forward_paths(
    problem: &FbsdeProblem,
    grid: &Grid,
    u_prev: &dyn ValueFunction,
    increments: Arc<IncrementSet>,
    iteration: usize,
) -> Result<PathEnsemble> {
    let n = grid.steps();
    let (dx, dw) = (problem.dim_x(), problem.dim_w());
    if increments.steps() != n || increments.dim_w() != dw {
        return Err(Error::InvalidInput(format!(
            "increments have {} steps and {} components, expected {n} and {dw}",
            increments.steps(),
            increments.dim_w()
        )));
    }
    if (increments.step_size() - grid.step_size()).abs() > 1e-12 * grid.step_size() {
        return Err(Error::InvalidInput(format!(
            "increment step {} differs from grid step {}",
            increments.step_size(),
            grid.step_size()
        )));
    }
    let h = grid.step_size();
    let paths = increments.paths();
    let stride = (n + 1) * dx;
    let mut states = vec![0.0; paths * stride];
    let failures: Vec<Option<usize>> = states
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(p, out)| {
            let mut drift = vec![0.0; dx];
            let mut diff = vec![0.0; dx * dw];
            out[..dx].copy_from_slice(problem.x0());
            let dws = increments.path(p);
            for i in 0..n {
                let (done, rest) = out.split_at_mut((i + 1) * dx);
                let x = &done[i * dx..];
                let next = &mut rest[..dx];
                let t = grid.time(i);
                let y = u_prev.value(i, x);
                problem.drift(t, x, y, &mut drift);
                problem.diffusion(t, x, y, &mut diff);
                let dw_i = &dws[i * dw..(i + 1) * dw];
                let mut ok = true;
                for a in 0..dx {
                    let row = &diff[a * dw..(a + 1) * dw];
                    let noise: f64 = row.iter().zip(dw_i).map(|(s, w)| s * w).sum();
                    next[a] = x[a] + drift[a] * h + noise;
                    ok &= next[a].is_finite();
                }
                if !ok {
                    return Some(i + 1);
                }
            }
            None
        })
        .collect();
    if let Some((path, step)) = failures.iter().enumerate().find_map(|(p, f)| f.map(|s| (p, s))) {
        return Err(Error::NonFiniteState { path, step });
    }
    Ok(PathEnsemble { states, steps: n, paths, dim_x: dx, iteration, increments })
}

const MAGIC: &[u8; 8] = b"FBSDEPTH";
const DUMP_VERSION: u32 = 1;

/// Contents of an ensemble dump.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDump {
    pub steps: usize,
    pub paths: usize,
    pub dim_x: usize,
    pub dim_w: usize,
    pub h: f64,
    pub seed: u64,
    /// `(λ, i, d)` order, as in [`PathEnsemble::states`].
    pub states: Vec<f64>,
}

/// Writes the binary dump: `FBSDEPTH`, version `u32`, `n, Λ, dim_x, d_w` as `u64`,
/// `h` as `f64`, seed `u64`, then the states; all little-endian.
pub fn write_ensemble(path: &Path, ensemble: &PathEnsemble) -> Result<()> {
    let io = |source| Error::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let inc = ensemble.increments();
    let mut header = Vec::with_capacity(64);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    for v in [ensemble.steps, ensemble.paths, ensemble.dim_x, inc.dim_w()] {
        header.extend_from_slice(&(v as u64).to_le_bytes());
    }
    header.extend_from_slice(&inc.step_size().to_le_bytes());
    header.extend_from_slice(&inc.seed().to_le_bytes());
    w.write_all(&header).map_err(io)?;
    for v in &ensemble.states {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_ensemble(path: &Path) -> Result<EnsembleDump> {
    let io = |source| Error::Io { path: path.display().to_string(), source };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io)?).read_to_end(&mut bytes).map_err(io)?;
    let bad = |what: &str| Error::InvalidInput(format!("{}: {what}", path.display()));
    const HEADER: usize = 8 + 4 + 4 * 8 + 8 + 8;
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(bad("not an ensemble dump"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let steps = word(12) as usize;
    let paths = word(20) as usize;
    let dim_x = word(28) as usize;
    let dim_w = word(36) as usize;
    let h = f64::from_bits(word(44));
    let seed = word(52);
    let count = paths
        .checked_mul(steps + 1)
        .and_then(|v| v.checked_mul(dim_x))
        .ok_or_else(|| bad("header sizes overflow"))?;
    if bytes.len() != HEADER + 8 * count {
        return Err(bad("truncated or oversized payload"));
    }
    let states = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EnsembleDump { steps, paths, dim_x, dim_w, h, seed, states })
}
