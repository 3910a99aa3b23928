use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("step size h = {h} makes the lambda schedule infeasible; the largest feasible step is {max_h}")]
    ScheduleInfeasible { h: f64, max_h: f64 },

    #[error("{requested} increment entries exceed the memory budget of {budget}")]
    Capacity { requested: usize, budget: usize },

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("non-finite basis value at row {row}, column {column}")]
    NonFiniteBasis { row: usize, column: usize },

    #[error("non-finite regression target at step {step} on path {path}")]
    NonFiniteTarget { step: usize, path: usize },

    #[error("step index {step} outside 0..={n}")]
    StepOutOfRange { step: usize, n: usize },

    #[error("quadrature oracle did not converge in {iterations} sweeps (last sup change {last_change:e})")]
    OracleNotConverged { iterations: usize, last_change: f64 },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True when the error signals a blow-up of the iteration rather than bad input.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::NonFiniteState { .. } | Error::NonFiniteTarget { .. } => true,
            Error::Iteration { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
