use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use fbsde_cli::config::defaults_help;
use fbsde_cli::{parse_config, run_experiment, CliError, Command, ExperimentConfig, EXIT_INVALID};

/// Solver and benchmarks for coupled forward-backward SDEs.
#[derive(Parser)]
#[command(name = "fbsde", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Evaluate the convergence conditions for the configured bounds.
    Check(Common),
    /// Run the iteration on the configured problem.
    Solve(Common),
    /// Sine benchmark against its closed-form value.
    BenchSine(Common),
    /// Convergence in the number of time steps.
    SweepN(Common),
    /// Error after each iteration.
    SweepM(Common),
    /// Solver against the quadrature oracle (one-dimensional problems).
    OracleCompare(Common),
}

#[derive(Args)]
struct Common {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-key override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Sub {
    fn split(self) -> (Command, Common) {
        match self {
            Sub::Check(c) => (Command::Check, c),
            Sub::Solve(c) => (Command::Solve, c),
            Sub::BenchSine(c) => (Command::BenchSine, c),
            Sub::SweepN(c) => (Command::SweepN, c),
            Sub::SweepM(c) => (Command::SweepM, c),
            Sub::OracleCompare(c) => (Command::OracleCompare, c),
        }
    }
}

fn load(command: Command, args: Common) -> Result<ExperimentConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for assignment in &args.set {
        config.apply_override(assignment)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out = out;
    }
    config.command = Some(command);
    Ok(config)
}

fn main() -> ExitCode {
    let help = defaults_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    for name in ["check", "solve", "bench-sine", "sweep-n", "sweep-m", "oracle-compare"] {
        cmd = cmd.mut_subcommand(name, |s| s.after_long_help(help.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let (command, args) = cli.command.split();
    let result = load(command, args).and_then(|config| run_experiment(&config));
    match result {
        Ok(outcome) => {
            if !outcome.details.is_empty() {
                print!("{}", outcome.details);
            }
            println!("{}", outcome.summary);
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("fbsde: {e}");
            ExitCode::from(EXIT_INVALID as u8)
        }
    }
}
