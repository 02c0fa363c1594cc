use thiserror::Error;

/// Errors surfaced by the numeric pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm vector where a direction is required")]
    DegenerateVector,
    #[error("softmax temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("cross-entropy target places mass on a zero prediction (index {0})")]
    LogOfZero(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeError { expected: String, got: String },
    #[error("not enough identities to produce a non-empty train/test split")]
    SplitTooSmall,
    #[error("no opposite-modality reference frames available for style transfer")]
    NoReference,
    #[error("contrastive batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("triplet anchor has an empty positive or negative set")]
    DegenerateTriplet,
    #[error("clustering produced no clusters (all points are noise)")]
    NoClusters,
    #[error("pseudo-label {label} out of range for bank of size {bank}")]
    LabelMismatch { label: i64, bank: usize },
    #[error("candidate set of size {0} is not ambiguous")]
    NotAmbiguous(usize),
    #[error("query identities missing from gallery: {0:?}")]
    UnmatchableQuery(Vec<u32>),
    #[error("numerical divergence (non-finite loss) at epoch {epoch}")]
    NumericalDivergence { epoch: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("corrupt or unreadable artifact: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code contract: 0 success, 2 config, 3 I/O or corruption,
    /// 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) | Error::Format(_) | Error::Json(_) => 3,
            Error::NumericalDivergence { .. } => 4,
            _ => 1,
        }
    }
}
