use alloc::string::String;
use alloc::vec::Vec;

use crate::uncertainty::GarchXParams;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("history too short: need {needed} values, got {got}")]
    ShortHistory { needed: usize, got: usize },
    #[error("rank-deficient design matrix; collinear columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("column {column} has zero variance")]
    ZeroVariance { column: usize },
    #[error("matrix is not positive semidefinite")]
    NotPositiveDefinite,
    #[error("GARCH-X likelihood search did not converge (best log-likelihood {log_likelihood})")]
    NoConvergence {
        best: GarchXParams,
        log_likelihood: f64,
    },
    #[error("model is infeasible: {0}")]
    Infeasible(String),
    #[error("no strictly feasible point: probability {probability} at the minimum-release policy, need {required}")]
    SlaterInfeasible { probability: f64, required: f64 },
    #[error("line search precondition violated: {0}")]
    LineSearch(String),
    #[error("CDF accuracy {accuracy} too coarse for risk tolerance {epsilon}")]
    AccuracyTooCoarse { accuracy: f64, epsilon: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
