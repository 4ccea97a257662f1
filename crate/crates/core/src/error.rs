use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter shape: expected {expected} entries, got {got}")]
    ParamShape { expected: usize, got: usize },

    #[error("matrix is not positive definite: {0}")]
    Definiteness(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("singular geometry: {0}")]
    Singularity(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Coarse class used by front ends to pick an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Unavailable(_) => ErrorKind::Config,
            Error::Parse { .. } | Error::Io(_) | Error::Json(_) | Error::InsufficientData(_) => {
                ErrorKind::Data
            }
            Error::Contract(_) | Error::Shape { .. } | Error::ParamShape { .. } => ErrorKind::Data,
            Error::Definiteness(_) | Error::Singularity(_) | Error::NonFinite(_) => {
                ErrorKind::Numeric
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
