use thiserror::Error;

pub type Result<T> = std::result::Result<T, SalError>;

#[derive(Debug, Error)]
pub enum SalError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("logistic loss requires targets in {{0, 1}}, got {0}")]
    InvalidLabel(f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("adversarial ascent diverged at sample {sample}: {reason}")]
    Divergence { sample: usize, reason: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("rejection sampling exhausted its budget of {budget} draws with {accepted}/{target} accepted")]
    SamplingBudget {
        budget: usize,
        accepted: usize,
        target: usize,
    },

    #[error("infeasible transport problem: {0}")]
    Infeasible(String),

    #[error("radius search failed: {0}")]
    RadiusSearch(String),

    #[error("{path}:{line}: {msg}")]
    Csv {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SalError {
    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SalError::Divergence { .. } | SalError::NonFinite(_) | SalError::RadiusSearch(_)
        )
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SalError::Io {
            path: path.into(),
            source,
        }
    }
}
