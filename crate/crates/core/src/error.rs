use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("invalid shift spec: {0}")]
    InvalidShift(String),

    #[error("reference set has {0} samples; at least 2 are required to partition")]
    ReferenceTooSmall(usize),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("length mismatch: {left} predictions vs {right} ground truths")]
    LengthMismatch { left: usize, right: usize },

    #[error("bad magic in {kind} file: expected {expected:?}")]
    BadMagic { kind: &'static str, expected: &'static str },

    #[error("short read while decoding {field}")]
    ShortRead { field: &'static str },

    #[error("invalid value in field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },

    #[error("training failed: {0}")]
    Training(String),

    #[error("empty training set")]
    EmptyTrainSet,

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("invalid run state: {0}")]
    InvalidState(String),

    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("generation {generation}: {source}")]
    AtGeneration {
        generation: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("seed {seed}, {what}: {source}")]
    InRun {
        seed: u64,
        what: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_generation(self, generation: usize) -> Self {
        match self {
            e @ Error::AtGeneration { .. } => e,
            e => Error::AtGeneration { generation, source: Box::new(e) },
        }
    }

    /// True for errors caused by bad user input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        if let Error::InRun { source, .. } | Error::AtGeneration { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::InvalidShift(_)
                | Error::InvalidField { .. }
                | Error::Config { .. }
        )
    }
}
