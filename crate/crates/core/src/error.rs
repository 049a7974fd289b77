use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("row length mismatch at line {line}: expected {expected} fields, found {found}")]
    RowLength { line: usize, expected: usize, found: usize },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),
}

impl Error {
    /// Stable machine-readable code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::BadMagic => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::MalformedHeader(_) => "malformed_header",
            Error::RowLength { .. } => "row_length_mismatch",
            Error::Truncated(_) => "truncated_payload",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape_mismatch",
            Error::Parameter(_) => "invalid_parameter",
        }
    }

    /// True for errors caused by unreadable or malformed input, as opposed to
    /// well-formed input that fails validation or shape checks.
    pub fn is_format_error(&self) -> bool {
        !matches!(self, Error::Validation(_) | Error::Shape(_))
    }
}
