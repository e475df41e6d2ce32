use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NgdError>;

#[derive(Debug, Error)]
pub enum NgdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("topology generation failed after {attempts} attempts: {reason}")]
    TopologyGeneration { attempts: u32, reason: String },

    #[error("numerical failure: {message}")]
    NumericalFailure {
        message: String,
        /// Best available estimate when an iterative method gave up.
        best_estimate: Option<f64>,
    },

    #[error("linear predictor overflow ({value:.3} > {limit}) on client {client}")]
    NumericOverflow { client: usize, value: f64, limit: f64 },

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("stable-solution system is singular or ill-conditioned (condition estimate {condition:.3e})")]
    SingularOmega { condition: f64 },

    #[error("solver failed after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    SolverFailure { iterations: usize, grad_norm: f64 },

    #[error("iteration diverged at t = {iteration} (max |theta| = {max_abs:.3e})")]
    Diverged { iteration: usize, max_abs: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("schema version mismatch in {path}: expected {expected}, found {found}")]
    SchemaMismatch { path: PathBuf, expected: String, found: String },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NgdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NgdError::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        NgdError::NumericalFailure { message: msg.into(), best_estimate: None }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        NgdError::Parse { context: context.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NgdError::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            NgdError::InvalidArgument(_)
            | NgdError::Config(_)
            | NgdError::SchemaMismatch { .. }
            | NgdError::Parse { .. } => 2,
            NgdError::Io { .. } => 4,
            _ => 3,
        }
    }

    /// True for failures that mean an NGD trajectory blew up rather than a bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, NgdError::Diverged { .. } | NgdError::NumericOverflow { .. })
    }
}
