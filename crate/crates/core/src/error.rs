use thiserror::Error;

/// Broad failure class, used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate admission id {id:?}")]
    DuplicateAdmission { id: String, line: usize },

    #[error("{0} vocabulary is empty after frequency filtering")]
    EmptyVocabulary(&'static str),

    #[error("no usable admissions: {0}")]
    EmptyDataset(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("no negative procedures available: all {0} procedures are positive")]
    EmptyComplement(usize),

    #[error("{what} index {index} out of range for size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sinkhorn scaling became non-finite at iteration {iteration}")]
    SinkhornDiverged { iteration: usize },

    #[error("problem too large for exhaustive enumeration: {rows}x{cols} > 25 cells")]
    TooLarge { rows: usize, cols: usize },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::TooLarge { .. } => ErrorClass::Usage,
            Error::NonFinite(_) | Error::SinkhornDiverged { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
