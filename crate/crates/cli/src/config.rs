//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, lists are comma separated.
//! Unknown keys are rejected with a spelling suggestion.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use fbsde::conditions::DEFAULT_SLACK;
use fbsde::oracle::OracleConfig;
use fbsde::paths::DEFAULT_INCREMENT_BUDGET;
use fbsde::solver::SolverConfig;
use fbsde::CoefficientBounds;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Check,
    Solve,
    BenchSine,
    SweepN,
    SweepM,
    OracleCompare,
}

impl Command {
    pub const ALL: [Command; 6] =
        [Command::Check, Command::Solve, Command::BenchSine, Command::SweepN, Command::SweepM, Command::OracleCompare];

    pub fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Solve => "solve",
            Command::BenchSine => "bench-sine",
            Command::SweepN => "sweep-n",
            Command::SweepM => "sweep-m",
            Command::OracleCompare => "oracle-compare",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown command `{s}` (expected one of {})", names(Command::ALL.map(Command::name))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Sine,
    ConstantDrift,
    BrownianTerminal,
    QuadraticTerminal,
    Counterexample,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 5] = [
        ProblemKind::Sine,
        ProblemKind::ConstantDrift,
        ProblemKind::BrownianTerminal,
        ProblemKind::QuadraticTerminal,
        ProblemKind::Counterexample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Sine => "sine",
            ProblemKind::ConstantDrift => "constant-drift",
            ProblemKind::BrownianTerminal => "brownian-terminal",
            ProblemKind::QuadraticTerminal => "quadratic-terminal",
            ProblemKind::Counterexample => "counterexample",
        }
    }

    /// `T = 3π/4` for the counterexample, `1` otherwise.
    pub fn default_horizon(self) -> f64 {
        match self {
            ProblemKind::Counterexample => 0.75 * PI,
            _ => 1.0,
        }
    }
}

impl FromStr for ProblemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ProblemKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown problem `{s}` (expected one of {})", names(ProblemKind::ALL.map(ProblemKind::name))))
    }
}

fn names<const N: usize>(list: [&str; N]) -> String {
    list.join(", ")
}

/// Every setting of one run. Optional fields fall back to per-problem or per-command defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Option<Command>,
    pub problem: ProblemKind,
    pub dim: usize,
    pub sigma: f64,
    pub r: f64,
    /// Constant drift of `constant-drift`.
    pub drift: f64,
    /// Every component of the initial state.
    pub x0: f64,
    pub horizon: Option<f64>,
    pub n: usize,
    pub paths: usize,
    pub seed: u64,
    pub tol: f64,
    pub m_max: usize,
    pub ridge: f64,
    pub truncation: f64,
    pub include_terminal: bool,
    pub resample_per_iteration: bool,
    pub stop_on_function_change: bool,
    pub increment_budget: usize,
    /// Number of consecutive seeds starting at `seed`.
    pub seeds: Option<usize>,
    pub n_list: Vec<usize>,
    /// Rayon worker count; all cores when absent.
    pub workers: Option<usize>,
    pub x_lo: Option<f64>,
    pub x_hi: Option<f64>,
    pub nodes: usize,
    pub quad_order: usize,
    pub inner_tol: f64,
    pub inner_max: usize,
    /// `λ1` at which `check` also reports the discrete contraction constant.
    pub lambda1: f64,
    pub slack: f64,
    /// Write the final forward ensemble as a binary dump (`solve`).
    pub dump_paths: bool,
    pub out: PathBuf,
    /// Explicit bounds; unset entries are zero and `k_lip` is tightened.
    pub bounds: BoundOverrides,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundOverrides {
    pub entries: [Option<f64>; 13],
}

pub const BOUND_KEYS: [&str; 13] =
    ["k_lip", "k_b", "k_f", "b_y", "sigma_x", "sigma_y", "f_x", "f_z", "g_x", "b_0", "sigma_0", "f_0", "g_0"];

impl BoundOverrides {
    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(Option::is_none)
    }

    pub fn to_bounds(&self) -> CoefficientBounds {
        let v = |k: usize| self.entries[k].unwrap_or(0.0);
        let b = CoefficientBounds {
            k_lip: v(0),
            k_b: v(1),
            k_f: v(2),
            b_y: v(3),
            sigma_x: v(4),
            sigma_y: v(5),
            f_x: v(6),
            f_z: v(7),
            g_x: v(8),
            b_0: v(9),
            sigma_0: v(10),
            f_0: v(11),
            g_0: v(12),
        };
        if self.entries[0].is_none() {
            b.with_tight_k()
        } else {
            b
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let solver = SolverConfig::default();
        let oracle = OracleConfig::default();
        Self {
            command: None,
            problem: ProblemKind::Sine,
            dim: 1,
            sigma: 0.1,
            r: 0.0,
            drift: 0.0,
            x0: FRAC_PI_2,
            horizon: None,
            n: 50,
            paths: solver.paths,
            seed: solver.seed,
            tol: solver.tol,
            m_max: solver.m_max,
            ridge: solver.ridge,
            truncation: solver.truncation,
            include_terminal: solver.include_terminal,
            resample_per_iteration: solver.resample_per_iteration,
            stop_on_function_change: solver.stop_on_function_change,
            increment_budget: DEFAULT_INCREMENT_BUDGET,
            seeds: None,
            n_list: vec![10, 20, 40, 80],
            workers: None,
            x_lo: None,
            x_hi: None,
            nodes: oracle.nodes,
            quad_order: oracle.quad_order,
            inner_tol: oracle.inner_tol,
            inner_max: oracle.inner_max,
            lambda1: 1.0,
            slack: DEFAULT_SLACK,
            dump_paths: false,
            out: PathBuf::from("fbsde-out"),
            bounds: BoundOverrides::default(),
        }
    }
}

/// Parse failure, with the 1-based line when it came from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

pub const KEYS: [&str; 32] = [
    "command",
    "problem",
    "dim",
    "sigma",
    "r",
    "drift",
    "x0",
    "horizon",
    "n",
    "paths",
    "seed",
    "tol",
    "m_max",
    "ridge",
    "truncation",
    "include_terminal",
    "resample_per_iteration",
    "stop_on_function_change",
    "increment_budget",
    "seeds",
    "n_list",
    "workers",
    "x_lo",
    "x_hi",
    "nodes",
    "quad_order",
    "inner_tol",
    "inner_max",
    "lambda1",
    "slack",
    "dump_paths",
    "out",
];

fn known_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().copied().chain(BOUND_KEYS.iter().copied())
}

/// Closest known key by edit distance, if reasonably close.
pub fn suggest(key: &str) -> Option<&'static str> {
    known_keys()
        .map(|k| (strsim::levenshtein(key, k), k))
        .filter(|(d, k)| *d <= 3.max(k.len() / 3) && *d < key.len().max(1))
        .min_by_key(|(d, _)| *d)
        .map(|(_, k)| k)
}

fn real(v: &str) -> Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn positive(key: &str, v: &str) -> Result<f64, String> {
    let x = real(v)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err(format!("{key} must satisfy {key} > 0, got {v}"))
    }
}

fn nonnegative(key: &str, v: &str) -> Result<f64, String> {
    let x = real(v)?;
    if x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("{key} must satisfy {key} >= 0, got {v}"))
    }
}

fn count(key: &str, v: &str, min: usize) -> Result<usize, String> {
    match v.parse::<usize>() {
        Ok(k) if k >= min => Ok(k),
        _ => Err(format!("{key} must be an integer with {key} >= {min}, got {v}")),
    }
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key} must be true or false, got {v}")),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>, String> {
    let inner = v.trim().trim_start_matches('[').trim_end_matches(']');
    let items = inner.split(',').map(|s| count(key, s.trim(), 1)).collect::<Result<Vec<_>, _>>()?;
    if items.is_empty() {
        return Err(format!("{key} must not be empty"));
    }
    Ok(items)
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        if let Some(k) = BOUND_KEYS.iter().position(|b| *b == key) {
            let x = real(v)?;
            if k != 1 && k != 2 && x < 0.0 {
                return Err(format!("{key} must satisfy {key} >= 0, got {v}"));
            }
            self.bounds.entries[k] = Some(x);
            return Ok(());
        }
        match key {
            "command" => self.command = Some(v.parse()?),
            "problem" => self.problem = v.parse()?,
            "dim" => self.dim = count(key, v, 1)?,
            "sigma" => self.sigma = positive(key, v)?,
            "r" => self.r = real(v)?,
            "drift" => self.drift = real(v)?,
            "x0" => self.x0 = real(v)?,
            "horizon" => self.horizon = Some(positive(key, v)?),
            "n" => self.n = count(key, v, 1)?,
            "paths" => self.paths = count(key, v, 2)?,
            "seed" => self.seed = v.parse().map_err(|_| format!("seed must be an unsigned 64-bit integer, got {v}"))?,
            "tol" => self.tol = positive(key, v)?,
            "m_max" => self.m_max = count(key, v, 1)?,
            "ridge" => self.ridge = nonnegative(key, v)?,
            "truncation" => self.truncation = positive(key, v)?,
            "include_terminal" => self.include_terminal = flag(key, v)?,
            "resample_per_iteration" => self.resample_per_iteration = flag(key, v)?,
            "stop_on_function_change" => self.stop_on_function_change = flag(key, v)?,
            "increment_budget" => self.increment_budget = count(key, v, 1)?,
            "seeds" => self.seeds = Some(count(key, v, 1)?),
            "n_list" => self.n_list = list(key, v)?,
            "workers" => self.workers = Some(count(key, v, 1)?),
            "x_lo" => self.x_lo = Some(real(v)?),
            "x_hi" => self.x_hi = Some(real(v)?),
            "nodes" => self.nodes = count(key, v, 2)?,
            "quad_order" => self.quad_order = count(key, v, 8)?,
            "inner_tol" => self.inner_tol = positive(key, v)?,
            "inner_max" => self.inner_max = count(key, v, 1)?,
            "lambda1" => self.lambda1 = positive(key, v)?,
            "slack" => self.slack = nonnegative(key, v)?,
            "dump_paths" => self.dump_paths = flag(key, v)?,
            "out" => {
                if v.is_empty() {
                    return Err("out must not be empty".into());
                }
                self.out = PathBuf::from(v)
            }
            _ => {
                return Err(match suggest(key) {
                    Some(s) => format!("unknown key `{key}` (did you mean `{s}`?)"),
                    None => format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError { line: None, message: format!("override `{assignment}` is not key=value") })?;
        self.set(key.trim(), value).map_err(|message| ConfigError { line: None, message: format!("--set {message}") })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon.unwrap_or_else(|| self.problem.default_horizon())
    }

    pub fn seed_list(&self, default_count: usize) -> Vec<u64> {
        let k = self.seeds.unwrap_or(default_count) as u64;
        (0..k).map(|j| self.seed.wrapping_add(j)).collect()
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            paths: self.paths,
            seed: self.seed,
            truncation: self.truncation,
            include_terminal: self.include_terminal,
            ridge: self.ridge,
            tol: self.tol,
            m_max: self.m_max,
            resample_per_iteration: self.resample_per_iteration,
            stop_on_function_change: self.stop_on_function_change,
            increment_budget: self.increment_budget,
        }
    }

    /// Oracle window `x0 ± 2` unless set explicitly.
    pub fn oracle(&self) -> OracleConfig {
        OracleConfig {
            x_lo: self.x_lo.unwrap_or(self.x0 - 2.0),
            x_hi: self.x_hi.unwrap_or(self.x0 + 2.0),
            nodes: self.nodes,
            quad_order: self.quad_order,
            inner_tol: self.inner_tol,
            inner_max: self.inner_max,
        }
    }

    /// `(key, value)` pairs that re-parse to this config; unset optionals are omitted.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e: Vec<(&'static str, String)> = Vec::new();
        if let Some(c) = self.command {
            e.push(("command", c.name().into()));
        }
        e.push(("problem", self.problem.name().into()));
        e.push(("dim", self.dim.to_string()));
        e.push(("sigma", format!("{:?}", self.sigma)));
        e.push(("r", format!("{:?}", self.r)));
        e.push(("drift", format!("{:?}", self.drift)));
        e.push(("x0", format!("{:?}", self.x0)));
        if let Some(h) = self.horizon {
            e.push(("horizon", format!("{h:?}")));
        }
        e.push(("n", self.n.to_string()));
        e.push(("paths", self.paths.to_string()));
        e.push(("seed", self.seed.to_string()));
        e.push(("tol", format!("{:?}", self.tol)));
        e.push(("m_max", self.m_max.to_string()));
        e.push(("ridge", format!("{:?}", self.ridge)));
        e.push(("truncation", format!("{:?}", self.truncation)));
        e.push(("include_terminal", self.include_terminal.to_string()));
        e.push(("resample_per_iteration", self.resample_per_iteration.to_string()));
        e.push(("stop_on_function_change", self.stop_on_function_change.to_string()));
        e.push(("increment_budget", self.increment_budget.to_string()));
        if let Some(s) = self.seeds {
            e.push(("seeds", s.to_string()));
        }
        e.push(("n_list", self.n_list.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")));
        if let Some(w) = self.workers {
            e.push(("workers", w.to_string()));
        }
        if let Some(x) = self.x_lo {
            e.push(("x_lo", format!("{x:?}")));
        }
        if let Some(x) = self.x_hi {
            e.push(("x_hi", format!("{x:?}")));
        }
        e.push(("nodes", self.nodes.to_string()));
        e.push(("quad_order", self.quad_order.to_string()));
        e.push(("inner_tol", format!("{:?}", self.inner_tol)));
        e.push(("inner_max", self.inner_max.to_string()));
        e.push(("lambda1", format!("{:?}", self.lambda1)));
        e.push(("slack", format!("{:?}", self.slack)));
        e.push(("dump_paths", self.dump_paths.to_string()));
        e.push(("out", self.out.display().to_string()));
        for (k, v) in BOUND_KEYS.iter().zip(&self.bounds.entries) {
            if let Some(v) = v {
                e.push((k, format!("{v:?}")));
            }
        }
        e
    }

    /// The config in file syntax.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Strict parse of a config file; every key may appear at most once.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut config = ExperimentConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| ConfigError { line: Some(line), message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
        let key = key.trim();
        if seen.iter().any(|k| k == key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        config.set(key, value).map_err(err)?;
        seen.push(key.to_string());
    }
    Ok(config)
}

/// `--help` text listing every key with its default.
pub fn defaults_help() -> String {
    let mut s = String::from(
        "Config file: one `key = value` per line, `#` comments, lists comma separated.\n\
         Defaults (optional keys without a default fall back as noted):\n",
    );
    for (k, v) in ExperimentConfig::default().entries() {
        let _ = writeln!(s, "  {k:<24} {v}");
    }
    for (k, note) in [
        ("command", "from the subcommand"),
        ("horizon", "1, or 3π/4 for counterexample"),
        ("seeds", "per command: 1, or 10 for sweep-n and oracle-compare"),
        ("workers", "all cores"),
        ("x_lo, x_hi", "x0 − 2, x0 + 2"),
    ] {
        let _ = writeln!(s, "  {k:<24} ({note})");
    }
    let _ = writeln!(s, "  {:<24} (catalog bounds of the problem; any one set switches to explicit bounds)", BOUND_KEYS.join(", "));
    s
}
