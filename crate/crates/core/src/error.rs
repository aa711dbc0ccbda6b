use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("every softmax entry is masked")]
    AllMasked,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("negative standard deviation {0}")]
    NegativeStddev(f64),

    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },

    #[error("every target position is ignored")]
    AllIgnored,

    #[error("sample has no source channel `{0}`")]
    MissingChannel(String),

    #[error("token grid must be at least 1x1")]
    EmptyGrid,

    #[error("unknown expert id {0}")]
    UnknownExpert(usize),

    #[error("retained expert set is empty")]
    EmptyRetainedSet,

    #[error("importance has zero mean")]
    ZeroMeanImportance,

    #[error("sigma must be positive, got {0}")]
    NonpositiveSigma(f64),

    #[error("epoch {t} outside [0, {total}]")]
    EpochOutOfRange { t: f64, total: usize },

    #[error("token id {id} overflows vocabulary of {vocab}")]
    VocabOverflow { id: usize, vocab: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("insufficient combinations: {0}")]
    InsufficientCombinations(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("checkpoint carries no contribution statistics")]
    MissingStats,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by the filesystem rather than by inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
