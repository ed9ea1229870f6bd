use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid HER2 class {0}, expected 0..=3")]
    InvalidClass(i64),

    #[error("invalid class fractions: {0}")]
    InvalidFractions(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("admissible class set is empty")]
    EmptyAdmissibleSet,

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("non-finite loss during {stage} at epoch {epoch}")]
    NonFiniteLoss { stage: &'static str, epoch: usize },

    #[error("slide {slide} has no admissible patches")]
    EmptySlide { slide: String },

    #[error("invalid patch {patch} in slide {slide}: {reason}")]
    InvalidPatch {
        slide: String,
        patch: String,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rejection sampling for slide {slide} (class {class}) exceeded {draws} draws")]
    RejectionExhausted {
        slide: usize,
        class: u8,
        draws: usize,
    },

    #[error("class {class} has {count} slides, fewer than {parts} split parts")]
    SplitTooSmall {
        class: u8,
        count: usize,
        parts: usize,
    },

    #[error("empty confusion matrix")]
    EmptyConfusion,

    #[error("rater label sets {0} and {1} share no slide ids")]
    DisjointRaters(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
