use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input in {context}")]
    NonFiniteInput { context: &'static str },

    #[error("matrix not symmetric within tolerance (max asymmetry {max_asym:e})")]
    NotSymmetric { max_asym: f64 },

    #[error(
        "eigensolver did not converge after {iterations} iterations \
         (best eigenvalue {best:e}, residual {residual:e})"
    )]
    EigNoConvergence {
        iterations: usize,
        best: f64,
        residual: f64,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label vector must be nonzero")]
    ZeroLabels,

    #[error("dataset difficulty undefined: {reason}")]
    UndefinedDifficulty { reason: &'static str },

    #[error("csv ingestion failed ({path}, row {row}): {message}")]
    Ingestion {
        path: String,
        row: usize,
        message: String,
    },

    #[error("invalid batch mask: {reason}")]
    InvalidMask { reason: String },

    #[error("activation not supported by this operation")]
    UnsupportedActivation,

    #[error("operation requires depth {expected}, got {got}")]
    UnsupportedDepth { expected: usize, got: usize },

    #[error("out of domain: {0}")]
    Domain(String),

    #[error("run diverged at step {step}")]
    Diverged { step: u64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
