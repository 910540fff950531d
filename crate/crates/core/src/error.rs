use thiserror::Error;

use crate::conditions::ConditionsReport;

pub type Result<T> = std::result::Result<T, IsphError>;

#[derive(Debug, Error)]
pub enum IsphError {
    /// An argument outside the mathematical domain of an operation (e.g. a negative radius).
    #[error("domain error: {0}")]
    Domain(String),

    /// Coincident particles or another configuration the operators cannot be evaluated on.
    #[error("degenerate particle state: {0}")]
    DegenerateState(String),

    /// The caller combined arguments that do not belong together.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {:.3e})", residual_history.last().copied().unwrap_or(f64::NAN))]
    SolverDiverged {
        iterations: usize,
        residual_history: Vec<f64>,
    },

    #[error("singular system: {0}")]
    Singular(String),

    /// A result contradicting a proven structural property (e.g. non-SPD Poisson matrix on
    /// an h-connected state).
    #[error("internal inconsistency: {0}")]
    Inconsistent(String),

    #[error("volume system infeasible: {0}")]
    InfeasibleVolumes(String),

    /// A step failed because the pre-step audit or the Poisson solve rejected the state.
    #[error("step rejected: {reason}")]
    StepRejected {
        reason: String,
        report: Box<ConditionsReport>,
    },

    #[error("step {step} failed: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<IsphError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl IsphError {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ IsphError::AtStep { .. } => e,
            other => IsphError::AtStep {
                step,
                source: Box::new(other),
            },
        }
    }
}
