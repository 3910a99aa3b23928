//! Experiment dispatch and artifact writing.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use fbsde::conditions::{c2_discrete, check_conditions, ConditionReport};
use fbsde::model::{brownian_terminal, constant_drift, counterexample, counterexample_bounds, quadratic_terminal, SineParams};
use fbsde::oracle::{compare_with_oracle, convergence_study_n, log_log_slope, quadrature_fixed_point, run_sine_benchmark};
use fbsde::paths::write_ensemble;
use fbsde::solver::{simulate_solution_paths, solve, SolverConfig, StopReason};
use fbsde::{CoefficientBounds, Error, FbsdeProblem, Grid};

use crate::config::{Command, ConfigError, ExperimentConfig, ProblemKind};

/// Exit codes of the runner.
pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Usage(String),
    Solver(Error),
    Io { path: PathBuf, source: std::io::Error },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Solver(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { path, source } => CliError::Io { path: path.into(), source },
            e => CliError::Solver(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_INVALID
    }
}

/// What a finished run reports back.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub exit_code: i32,
    /// One line: command and headline number or verdict.
    pub summary: String,
    /// Longer human-readable text (the aligned `check` table and its JSON).
    pub details: String,
    pub artifacts: Vec<PathBuf>,
    pub data: Value,
}

/// `{:.16e}`: 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

struct Artifacts<'a> {
    config: &'a ExperimentConfig,
    seeds: Vec<u64>,
    written: Vec<PathBuf>,
}

impl<'a> Artifacts<'a> {
    fn new(config: &'a ExperimentConfig, seeds: Vec<u64>) -> Result<Self, CliError> {
        fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;
        Ok(Self { config, seeds, written: Vec::new() })
    }

    fn metadata(&self) -> Vec<(String, String)> {
        let mut meta: Vec<(String, String)> =
            self.config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        if self.config.horizon.is_none() {
            meta.push(("horizon_used".into(), format!("{:?}", self.config.horizon())));
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        meta.push(("seeds_used".into(), seeds.join(", ")));
        meta
    }

    /// Header row, one record per row, then the `# key: value` block.
    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.config.out.join(name);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let rows_written = w
            .write_record(header)
            .and_then(|_| rows.iter().try_for_each(|row| w.write_record(row)))
            .map_err(|e| CliError::Io { path: path.clone(), source: e.into() });
        rows_written?;
        let mut w = w.into_inner().map_err(|e| CliError::Io { path: path.clone(), source: e.into_error() })?;
        let mut meta = String::new();
        for (k, v) in self.metadata() {
            let _ = writeln!(meta, "# {k}: {v}");
        }
        w.write_all(meta.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&path))?;
        self.written.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, result: &impl Serialize) -> Result<(), CliError> {
        let path = self.config.out.join(name);
        let config: serde_json::Map<String, Value> =
            self.metadata().into_iter().map(|(k, v)| (k, Value::String(v))).collect();
        let doc = json!({ "config": config, "result": result });
        let text = serde_json::to_string_pretty(&doc).expect("serializable");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        self.written.push(path);
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let path = self.config.out.join(name);
        self.written.push(path.clone());
        path
    }
}

fn sine_params(config: &ExperimentConfig) -> SineParams {
    SineParams { dim: config.dim, sigma: config.sigma, r: config.r, x0: config.x0, horizon: config.horizon() }
}

/// The catalog problem and its bounds; explicit bound keys replace the catalog bounds.
pub fn build_problem(config: &ExperimentConfig) -> Result<(FbsdeProblem, Option<CoefficientBounds>), CliError> {
    let (d, t) = (config.dim, config.horizon());
    let (problem, bounds) = match config.problem {
        ProblemKind::Sine => {
            let p = sine_params(config);
            (p.problem()?, Some(p.bounds()))
        }
        ProblemKind::ConstantDrift => {
            let (p, b) = constant_drift(d, config.drift, config.sigma, config.x0, t)?;
            (p, Some(b))
        }
        ProblemKind::BrownianTerminal => {
            let (p, b) = brownian_terminal(d, config.sigma, config.x0, t)?;
            (p, Some(b))
        }
        ProblemKind::QuadraticTerminal => (quadratic_terminal(d, config.sigma, config.x0, t)?, None),
        ProblemKind::Counterexample => (counterexample(config.x0, t)?, Some(counterexample_bounds())),
    };
    let bounds = if config.bounds.is_empty() { bounds } else { Some(config.bounds.to_bounds()) };
    if let Some(b) = &bounds {
        b.validate()?;
    }
    Ok((problem, bounds))
}

fn require_sine(config: &ExperimentConfig, command: Command) -> Result<SineParams, CliError> {
    if config.problem != ProblemKind::Sine {
        return Err(CliError::Usage(format!(
            "{} needs problem = sine (got {})",
            command.name(),
            config.problem.name()
        )));
    }
    Ok(sine_params(config))
}

fn diverged(command: Command, err: &Error) -> ExperimentOutcome {
    ExperimentOutcome {
        exit_code: EXIT_DIVERGED,
        summary: format!("{}: diverged: {err}", command.name()),
        details: String::new(),
        artifacts: Vec::new(),
        data: json!({ "diverged": true, "error": err.to_string() }),
    }
}

fn is_blow_up(err: &Error) -> bool {
    err.is_divergence() || matches!(err, Error::OracleNotConverged { .. })
}

/// Runs the configured command, inside a dedicated worker pool when `workers` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let command = config
        .command
        .ok_or_else(|| CliError::Usage("no command given; use one of check, solve, bench-sine, sweep-n, sweep-m, oracle-compare".into()))?;
    let go = || match dispatch(config, command) {
        Err(CliError::Solver(e)) if is_blow_up(&e) => Ok(diverged(command, &e)),
        other => other,
    };
    match config.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {w} workers: {e}")))?
            .install(go),
        None => go(),
    }
}

fn dispatch(config: &ExperimentConfig, command: Command) -> Result<ExperimentOutcome, CliError> {
    match command {
        Command::Check => run_check(config),
        Command::Solve => run_solve(config),
        Command::BenchSine => run_bench(config),
        Command::SweepN => run_sweep_n(config),
        Command::SweepM => run_sweep_m(config),
        Command::OracleCompare => run_oracle_compare(config),
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "holds"
    } else {
        "fails"
    }
}

/// Aligned text table of a condition report.
pub fn condition_table(report: &ConditionReport) -> String {
    let rows: Vec<(&str, String)> = vec![
        ("l0", num(report.l0)),
        ("l1", num(report.l1)),
        ("c1", num(report.c1_at_l1)),
        ("l2", num(report.l2_at_l1)),
        ("c2", num(report.c2_at_l1)),
        ("cond_3_2 (L0 < 1/e)", flag(report.lipschitz_control).into()),
        ("cond_4_2 (c1 < 1)", flag(report.growth_control).into()),
        ("cond_5_1 (c2 < 1)", flag(report.contraction).into()),
        ("rate", report.predicted_rate.map_or("none".into(), num)),
        ("l_bar", num(report.bound_l_bar)),
        ("g_bar", num(report.bound_g_bar)),
        ("h_bar", num(report.bound_h_bar)),
    ];
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
}

fn run_check(config: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let (_, bounds) = build_problem(config)?;
    let bounds = bounds.ok_or_else(|| {
        CliError::Usage(format!("problem {} has no catalog bounds; set the bound keys", config.problem.name()))
    })?;
    let horizon = config.horizon();
    let report = check_conditions(&bounds, horizon, config.slack)?;
    let discrete = c2_discrete(&bounds, config.n, horizon, config.lambda1, report.l1, report.l1);
    let mut details = condition_table(&report);
    match &discrete {
        Ok(v) => {
            let _ = writeln!(details, "c2 at n = {}, lambda1 = {}: {}", config.n, config.lambda1, num(*v));
        }
        Err(e) => {
            let _ = writeln!(details, "c2 at n = {}: {e}", config.n);
        }
    }
    let json_text = serde_json::to_string_pretty(&report).expect("serializable");
    details.push_str(&json_text);
    details.push('\n');
    let mut art = Artifacts::new(config, vec![config.seed])?;
    art.json("check.json", &report)?;
    let verdict = if report.all_hold() {
        "all conditions hold".to_string()
    } else {
        let failed: Vec<&str> = [
            ("cond_3_2", report.lipschitz_control),
            ("cond_4_2", report.growth_control),
            ("cond_5_1", report.contraction),
        ]
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(k, _)| *k)
        .collect();
        format!("failing: {}", failed.join(", "))
    };
    Ok(ExperimentOutcome {
        exit_code: EXIT_OK,
        summary: format!("check: {verdict} (c2 = {})", num(report.c2_at_l1)),
        details,
        artifacts: art.written,
        data: serde_json::to_value(report).expect("serializable"),
    })
}

fn run_solve(config: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let (problem, bounds) = build_problem(config)?;
    let grid = Grid::new(config.horizon(), config.n)?;
    let solution = solve(&problem, &grid, &config.solver(), bounds.as_ref())?;
    let report = &solution.report;
    let mut art = Artifacts::new(config, vec![config.seed])?;
    art.json("solve_report.json", report)?;
    art.json("estimate.json", &solution.estimate.to_record())?;
    if config.dump_paths {
        let sim = simulate_solution_paths(&problem, &grid, &solution.estimate, solution.increments.clone())?;
        let path = art.path("paths.bin");
        write_ensemble(&path, &sim.ensemble)?;
    }
    let converged = report.stop_reason == StopReason::Tolerance;
    let summary = if converged {
        format!("solve: y0 = {}, m_stop = {}, stop = tolerance", num(report.y0()), report.m_stop)
    } else {
        format!(
            "solve: diverged: no convergence within m_max = {} (last y0 = {}, last change = {})",
            report.m_max,
            num(report.y0()),
            num(report.iterations.last().map_or(f64::NAN, |it| it.delta_y0))
        )
    };
    Ok(ExperimentOutcome {
        exit_code: if converged { EXIT_OK } else { EXIT_DIVERGED },
        summary,
        details: String::new(),
        artifacts: art.written,
        data: serde_json::to_value(report).expect("serializable"),
    })
}

#[derive(Serialize)]
struct BenchSeed {
    seed: u64,
    y0_estimate: f64,
    abs_error: f64,
    m_stop: usize,
    stop_reason: StopReason,
    y0_per_iteration: Vec<f64>,
}

#[derive(Serialize)]
struct BenchSummary {
    y0_exact: f64,
    y0_mean: f64,
    mean_abs_error: f64,
    mean_m_stop: f64,
    per_seed: Vec<BenchSeed>,
    mse_curve: Vec<f64>,
}

fn run_bench(config: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let params = require_sine(config, Command::BenchSine)?;
    let grid = Grid::new(params.horizon, config.n)?;
    let seeds = config.seed_list(1);
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut curve = vec![0.0; grid.steps() + 1];
    for &seed in &seeds {
        let b = run_sine_benchmark(&params, &grid, &SolverConfig { seed, ..config.solver() })?;
        for (c, v) in curve.iter_mut().zip(&b.mse_curve) {
            *c += v / seeds.len() as f64;
        }
        per_seed.push(BenchSeed {
            seed,
            y0_estimate: b.y0_estimate,
            abs_error: b.abs_error,
            m_stop: b.m_stop,
            stop_reason: b.stop_reason,
            y0_per_iteration: b.report.y0_per_iteration,
        });
    }
    let k = seeds.len() as f64;
    let summary = BenchSummary {
        y0_exact: params.exact_y0(),
        y0_mean: per_seed.iter().map(|s| s.y0_estimate).sum::<f64>() / k,
        mean_abs_error: per_seed.iter().map(|s| s.abs_error).sum::<f64>() / k,
        mean_m_stop: per_seed.iter().map(|s| s.m_stop as f64).sum::<f64>() / k,
        per_seed,
        mse_curve: curve,
    };
    let mut art = Artifacts::new(config, seeds)?;
    let rows: Vec<Vec<String>> = summary
        .mse_curve
        .iter()
        .enumerate()
        .map(|(i, m)| vec![i.to_string(), num(grid.time(i)), num(*m)])
        .collect();
    art.csv("bench_sine_curve.csv", &["i", "t_i", "mse"], &rows)?;
    art.json("bench_sine.json", &summary)?;
    let converged = summary.per_seed.iter().all(|s| s.stop_reason == StopReason::Tolerance);
    let m_stops: Vec<String> = summary.per_seed.iter().map(|s| s.m_stop.to_string()).collect();
    let line = format!(
        "bench-sine: y0 = {} (exact {}), |error| = {}, m_stop = {}{}",
        num(summary.y0_mean),
        num(summary.y0_exact),
        num(summary.mean_abs_error),
        m_stops.join("/"),
        if converged { "" } else { ", diverged: m_max reached" }
    );
    Ok(ExperimentOutcome {
        exit_code: if converged { EXIT_OK } else { EXIT_DIVERGED },
        summary: line,
        details: String::new(),
        artifacts: art.written,
        data: serde_json::to_value(&summary).expect("serializable"),
    })
}

fn run_sweep_n(config: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let params = require_sine(config, Command::SweepN)?;
    let seeds = config.seed_list(10);
    let study = convergence_study_n(&params, &config.n_list, &seeds, &config.solver())?;
    let mut rows = Vec::with_capacity(study.rows.len());
    let mut points = Vec::new();
    for row in &study.rows {
        points.push((row.n as f64, row.abs_error));
        let slope = log_log_slope(&points).map_or(String::new(), num);
        rows.push(vec![row.n.to_string(), num(row.abs_error), num(row.m_stop), slope]);
    }
    let mut art = Artifacts::new(config, seeds)?;
    art.csv("sweep_n.csv", &["n", "abs_error", "m_stop", "slope_so_far"], &rows)?;
    art.json("sweep_n.json", &study)?;
    let converged = study.rows.iter().all(|r| r.stop_reasons.iter().all(|s| *s == StopReason::Tolerance));
    let slope = study.slope.map_or("undefined".into(), num);
    Ok(ExperimentOutcome {
        exit_code: if converged { EXIT_OK } else { EXIT_DIVERGED },
        summary: format!("sweep-n: slope = {slope}{}", if converged { "" } else { ", diverged: m_max reached" }),
        details: String::new(),
        artifacts: art.written,
        data: serde_json::to_value(&study).expect("serializable"),
    })
}

/// Per-`m` seed averages of a fixed-length iteration run.
#[derive(Debug, Clone, Serialize)]
pub struct SweepMRow {
    pub m: usize,
    pub y0: f64,
    pub abs_error: f64,
    pub delta_y0: f64,
}

/// Runs exactly `m_max` iterations per seed (the tolerance is disabled).
pub fn sweep_m(params: &SineParams, grid: &Grid, solver: &SolverConfig, seeds: &[u64]) -> Result<Vec<SweepMRow>, Error> {
    let problem = params.problem()?;
    let exact = params.exact_y0();
    let k = seeds.len() as f64;
    let mut rows: Vec<SweepMRow> =
        (1..=solver.m_max).map(|m| SweepMRow { m, y0: 0.0, abs_error: 0.0, delta_y0: 0.0 }).collect();
    for &seed in seeds {
        let cfg = SolverConfig { seed, tol: f64::MIN_POSITIVE, ..solver.clone() };
        let s = solve(&problem, grid, &cfg, None)?;
        for (row, it) in rows.iter_mut().zip(&s.report.iterations) {
            row.y0 += it.y0 / k;
            row.abs_error += (it.y0 - exact).abs() / k;
            row.delta_y0 += it.delta_y0 / k;
        }
    }
    Ok(rows)
}

fn run_sweep_m(config: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let params = require_sine(config, Command::SweepM)?;
    let grid = Grid::new(params.horizon, config.n)?;
    let seeds = config.seed_list(1);
    let rows = sweep_m(&params, &grid, &config.solver(), &seeds)?;
    let table: Vec<Vec<String>> =
        rows.iter().map(|r| vec![r.m.to_string(), num(r.y0), num(r.abs_error), num(r.delta_y0)]).collect();
    let mut art = Artifacts::new(config, seeds)?;
    art.csv("sweep_m.csv", &["m", "y0", "abs_error", "delta_y0"], &table)?;
    let last = rows.last().expect("m_max >= 1");
    Ok(ExperimentOutcome {
        exit_code: EXIT_OK,
        summary: format!("sweep-m: y0 = {} after m = {}, |error| = {}", num(last.y0), last.m, num(last.abs_error)),
        details: String::new(),
        artifacts: art.written,
        data: serde_json::to_value(&rows).expect("serializable"),
    })
}

fn run_oracle_compare(config: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let (problem, _) = build_problem(config)?;
    if problem.dim_x() != 1 || problem.dim_w() != 1 {
        return Err(CliError::Usage("oracle-compare needs a one-dimensional problem (dim = 1)".into()));
    }
    let grid = Grid::new(config.horizon(), config.n)?;
    let seeds = config.seed_list(10);
    let oracle = config.oracle();
    let comparison = compare_with_oracle(&problem, &grid, &seeds, &config.solver(), &oracle)?;
    let reference = quadrature_fixed_point(&problem, &grid, &oracle)?;
    let mut art = Artifacts::new(config, seeds)?;
    let grid_path = art.path("oracle_grid.csv");
    let mut buf = Vec::new();
    reference.function.write_csv(&mut buf).map_err(io_err(&grid_path))?;
    for (k, v) in art.metadata() {
        let _ = writeln!(buf, "# {k}: {v}");
    }
    fs::write(&grid_path, buf).map_err(io_err(&grid_path))?;
    art.json("oracle_compare.json", &comparison)?;
    Ok(ExperimentOutcome {
        exit_code: EXIT_OK,
        summary: format!(
            "oracle-compare: oracle u0 = {}, solver mean = {}, difference = {} {} allowed {} ({})",
            num(comparison.oracle_u0),
            num(comparison.solver_mean),
            num(comparison.difference),
            if comparison.agrees { "<=" } else { ">" },
            num(comparison.allowed),
            if comparison.agrees { "agree" } else { "disagree" }
        ),
        details: String::new(),
        artifacts: art.written,
        data: serde_json::to_value(&comparison).expect("serializable"),
    })
}
