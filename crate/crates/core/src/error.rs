use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar([usize; 2]),

    #[error("invalid phase-type parameters: {0}")]
    InvalidPh(String),

    #[error("uniformization needs {required} terms but the cap is {cap}")]
    TruncationCap { required: u64, cap: u64 },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty sample set passed to {0}")]
    EmptySample(&'static str),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
