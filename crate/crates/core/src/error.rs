use thiserror::Error;

/// Errors raised across the solver, the analysis routines and the CLI.
#[derive(Debug, Error)]
pub enum QotError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no convergence after {iterations} outer iterations (residuals {residual_x:.3e}, {residual_y:.3e})")]
    Convergence {
        iterations: usize,
        residual_x: f64,
        residual_y: f64,
    },

    #[error("inconsistent potential pair: {0}")]
    InconsistentPair(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("x = {x} lies at a kink point of the potential")]
    Kink { x: f64 },

    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = QotError> = std::result::Result<T, E>;
