use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("function is not deterministic: two forward passes gave {first} and {second}")]
    NonDeterministicFunction { first: f64, second: f64 },
    #[error("waveform has {samples} samples, shorter than one {window}-sample window")]
    WaveTooShort { samples: usize, window: usize },
    #[error("sample rate {0} Hz does not divide into whole-sample hop and window")]
    SampleRateUnsupported(u32),
    #[error("need at least two channels, got {0}")]
    SingleChannel(usize),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("lattice has {lattice} label positions but the label sequence needs {labels}")]
    LatticeMismatch { lattice: usize, labels: usize },
    #[error("no alignment exists for {labels} labels over {frames} frames")]
    ImpossibleAlignment { labels: usize, frames: usize },
    #[error("brute-force enumeration refused: T+U = {0} exceeds the guard of 12")]
    TooLarge(usize),
    #[error("contrastive loss over an empty mask")]
    EmptyMask,
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("unknown {kind} {name:?}; expected one of {choices}")]
    UnknownName {
        kind: &'static str,
        name: String,
        choices: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("missing parameter {0:?}")]
    MissingParameter(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
