use thiserror::Error;

use crate::ocp::OcpSolution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("rejected input: {0}")]
    Rejected(String),

    #[error("time {t} outside reference domain [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error("ill-posed problem: {0}")]
    IllPosed(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: Option<Box<OcpSolution>>,
    },

    #[error("synthesis failed: {0}")]
    Synthesis(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    /// True for failures caused by the numerics rather than by the caller.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Infeasible(_)
                | Error::IllPosed(_)
                | Error::NotConverged { .. }
                | Error::Synthesis(_)
        )
    }
}
