use thiserror::Error;

/// Errors surfaced by the library. Numeric errors (shape/degenerate/non-finite)
/// are kept separate from data and config errors so callers can map them to
/// distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("fully masked row {0} in softmax")]
    DegenerateRow(usize),

    #[error("loss computed over zero positions")]
    EmptyLoss,

    #[error("non-finite gradient for parameter `{0}`; step rejected")]
    NonFiniteGrad(String),

    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors arising from numeric computation rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Dim(_)
                | Error::DegenerateRow(_)
                | Error::EmptyLoss
                | Error::NonFiniteGrad(_)
                | Error::NonFiniteLoss(_)
                | Error::Index(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
