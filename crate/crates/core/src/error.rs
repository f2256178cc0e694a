use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("resolution contract violated: {0}")]
    Resolution(String),

    #[error("quadrature did not converge (last refinements {previous:e} and {last:e})")]
    Quadrature { previous: f64, last: f64 },

    #[error("root bracket [{lo:e}, {hi:e}] not resolved within {steps} bisection steps")]
    RootFinding { lo: f64, hi: f64, steps: usize },

    #[error("iteration stagnated at residual {residual:e} after {iterations} iterations")]
    Stagnation {
        residual: f64,
        iterations: usize,
        history: Vec<f64>,
    },

    #[error("no corrector for direction {requested:?}; available: {available:?}")]
    MissingDirection {
        requested: Vec<f64>,
        available: Vec<Vec<f64>>,
    },

    #[error("standard error {se:e} exceeds requested precision {target:e}; use a longer window")]
    Precision { se: f64, target: f64 },

    #[error("singular linear system (pivot ratio {pivot_ratio:e})")]
    Singular { pivot_ratio: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("statistics: {0}")]
    Statistics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
