use thiserror::Error;

/// Errors raised across the emulation and calibration pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A scalar argument fell outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    /// Cholesky factorization failed even after diagonal inflation.
    #[error("correlation matrix is not numerically positive definite (jitter tried: {jitters:?})")]
    Conditioning { jitters: Vec<f64> },

    /// `Hᵀ C⁻¹ H` is singular; `columns` lists the dependent basis columns.
    #[error("trend basis is rank deficient on the design (dependent columns: {columns:?})")]
    RankDeficient { columns: Vec<usize> },

    /// The data or configuration leave nothing to estimate.
    #[error("degenerate problem: {0}")]
    Degenerate(String),

    /// The Fisher information has clearly negative eigenvalues.
    #[error("reference prior evaluation failed: Fisher information eigenvalues {eigenvalues:?}")]
    PriorEvaluation { eigenvalues: Vec<f64> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("simulator evaluation failed: {0}")]
    Simulator(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }

    /// True for failures caused by floating-point conditioning rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Conditioning { .. }
                | Error::RankDeficient { .. }
                | Error::PriorEvaluation { .. }
                | Error::FitFailure(_)
                | Error::Sampler(_)
                | Error::Degenerate(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
