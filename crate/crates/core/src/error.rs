use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants are grouped by how the command-line driver reports them: input
/// problems, numerical faults and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("empty output: {0}")]
    EmptyOutput(String),

    #[error("simulation fault at step {step}: {reason}")]
    SimulationFault { step: usize, reason: String },

    #[error("correlation undefined: zero sample variance in {0}")]
    UndefinedCorrelation(&'static str),

    #[error("degenerate parameters: {0}")]
    Degenerate(String),

    #[error("singular covariance matrix (condition number {0:e})")]
    SingularCovariance(f64),

    #[error("moment set is flagged as an unreliable approximation; use Monte Carlo moments")]
    FlaggedMoments,

    #[error("non-finite value at (t={t}, z={z}): {what}")]
    NonFinite { t: f64, z: f64, what: &'static str },

    #[error("training diverged after {steps} steps (loss {loss:e})")]
    Divergence { steps: usize, loss: f64 },

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error is a numerical fault rather than bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SimulationFault { .. }
                | Error::UndefinedCorrelation(_)
                | Error::Degenerate(_)
                | Error::SingularCovariance(_)
                | Error::FlaggedMoments
                | Error::NonFinite { .. }
                | Error::Divergence { .. }
                | Error::Evaluation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidInput(msg()))
    }
}
