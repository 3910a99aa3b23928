//! Config parsing and experiment orchestration behind the `fbsde` binary.
//!
//! Every experiment writes CSV and JSON artifacts into the `out` directory.
//! CSV files carry a header row and a trailing `# key: value` block that
//! echoes the full config and the seeds used.

pub mod config;
pub mod run;

pub use config::{parse_config, Command, ConfigError, ExperimentConfig, ProblemKind};
pub use run::{run_experiment, CliError, ExperimentOutcome, EXIT_DIVERGED, EXIT_INVALID, EXIT_OK};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
