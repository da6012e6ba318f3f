use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A density or statistic evaluated to a non-finite value.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("{operation} is not supported by model `{model}`")]
    Unsupported {
        operation: &'static str,
        model: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{which} covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite { which: &'static str },

    /// Every self-normalized importance weight underflowed.
    #[error("importance weights degenerate at beta={beta}: reduce the beta spread or increase K")]
    DegenerateWeights { beta: f64 },

    #[error("degenerate estimate: {0}")]
    DegenerateEstimate(String),

    #[error("oracle failed at step {step}: {source}")]
    OracleFailure {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    /// The sample size needed for a target gamma exceeds any representable count.
    #[error("required oracle sample size is unbounded for gamma={gamma}")]
    UnboundedSampleSize { gamma: f64 },

    /// Calibration produced gamma0 <= 0.
    #[error("gamma0={gamma0} is not positive for i={i}; use at least i={suggested_i}")]
    GammaNotPositive {
        gamma0: f64,
        i: u64,
        suggested_i: u64,
    },

    /// A cancellation flag was raised mid-run.
    #[error("interrupted")]
    Interrupted,

    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn unsupported(operation: &'static str, model: impl Into<String>) -> Self {
        Self::Unsupported {
            operation,
            model: model.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
