use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("feature vector contains a non-finite value")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding matrix must be L2-normalized before computing similarities")]
    NotNormalized,
    #[error("k = {k} is too large for {n} items (need 1 <= k < n)")]
    KTooLarge { k: usize, n: usize },
    #[error("triplet batch needs at least 2 anchors, got {0}")]
    BatchTooSmall(usize),
    #[error("no positive pairs were mined at epoch {epoch}")]
    NoPairsMined { epoch: usize },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("ground-truth identities are not available")]
    NoGroundTruth,
    #[error("invalid `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
