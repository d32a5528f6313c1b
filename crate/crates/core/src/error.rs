use thiserror::Error;

pub type Result<T, E = LemofError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LemofError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LemofError {
    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        LemofError::Dimension { op, lhs, rhs }
    }

    /// Input/config errors map to exit code 2, runtime and lifecycle errors to 3.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            LemofError::Dimension { .. }
                | LemofError::Config(_)
                | LemofError::Data(_)
                | LemofError::UndefinedMetric(_)
                | LemofError::Io(_)
                | LemofError::Json(_)
                | LemofError::Format(_)
        )
    }
}
