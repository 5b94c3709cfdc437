use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("index {index} out of range [{lo}, {hi}]")]
    IndexOutOfRange { index: usize, lo: usize, hi: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("unknown class label `{0}`")]
    UnknownClass(String),

    #[error("zero-norm vector cannot be normalized ({0})")]
    ZeroVector(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("non-finite gradient at {0}")]
    NonFiniteGradient(String),

    #[error("per-timestep null embedding missing for t = {0}")]
    MissingOverride(usize),

    #[error(
        "null-text optimization failed to descend at t = {t} after {halvings} step halvings \
         (loss {loss_before} -> {loss_after})"
    )]
    NoDescent { t: usize, halvings: usize, loss_before: f64, loss_after: f64 },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid file header: {0}")]
    Header(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch { expected: expected.to_string(), got: got.to_string() }
    }

    /// True for errors raised while validating inputs, before any compute.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidRange(_) | Error::UnknownClass(_) | Error::Config(_) | Error::Header(_) | Error::Json(_)
        )
    }
}
