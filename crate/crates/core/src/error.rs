use thiserror::Error;

use crate::nominal::NominalSolution;
use crate::zoro::SolveReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dynamics returned non-finite values at stage {stage}")]
    NonFiniteDynamics { stage: usize },

    #[error("non-finite {which} derivative at stage {stage}")]
    NonFiniteSensitivity { stage: usize, which: &'static str },

    #[error("Riccati block R + B'VB is not positive definite at stage {stage}")]
    IndefiniteRiccatiBlock { stage: usize },

    #[error("ellipsoidal tube diverged at stage {stage}")]
    DivergentTube { stage: usize },

    #[error("tube matrix is not positive semidefinite at stage {stage}")]
    NonPsdTube { stage: usize },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid multipliers: {0}")]
    InvalidMultipliers(String),

    #[error("nominal SQP did not converge in {iterations} iterations (kkt residual {kkt:.3e})")]
    MaxItersExceeded {
        iterations: usize,
        kkt: f64,
        best: Box<NominalSolution>,
    },

    #[error("QP subproblem failed: {0}")]
    QpSubproblemFailure(String),

    #[error("outer iteration {iteration}: {source}")]
    OuterIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("Riccati-ZORO did not reach backoff tolerance in {iterations} outer iterations")]
    OuterMaxIters {
        iterations: usize,
        report: Box<SolveReport>,
    },

    #[error("robust problem infeasible at the fixed point (slack norm {slack_norm:.3e})")]
    Infeasible {
        slack_norm: f64,
        report: Box<SolveReport>,
    },

    #[error("report is not converged")]
    NotConverged,

    #[error("oracle did not converge: {0}")]
    OracleNoConvergence(String),

    #[error("instance too large for the dense oracle: {0}")]
    InstanceTooLarge(String),

    #[error("finite-difference step must be positive and finite")]
    InvalidStep,

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("closed-loop step {step}: {source}")]
    ClosedLoopStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_outer(self, iteration: usize) -> Error {
        Error::OuterIteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// Strips outer-iteration and closed-loop context.
    pub fn root(&self) -> &Error {
        match self {
            Error::OuterIteration { source, .. } | Error::ClosedLoopStep { source, .. } => {
                source.root()
            }
            e => e,
        }
    }
}
