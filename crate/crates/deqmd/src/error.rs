//! Crate-wide error type.

/// Errors produced by any public operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// The mirror point left the domain of the inverse mirror map; consumed
    /// by backtracking, which retries with a smaller step.
    #[error("step size {tau} infeasible for the mirror update")]
    StepTooLarge { tau: f64 },
    #[error("backtracking exceeded {0} shrinks without satisfying the decrease test")]
    BacktrackingStalled(usize),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("{path}:{line}: {msg}")]
    Config {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Codec(String),
}

pub type Result<T> = std::result::Result<T, Error>;
