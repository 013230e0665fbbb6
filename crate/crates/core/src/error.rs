use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid bar on {date}: {reason}")]
    InvalidBar { date: NaiveDate, reason: String },

    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("unknown value `{value}` for field `{field}`")]
    UnknownEnum { field: String, value: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("forecaster error: {0}")]
    Forecaster(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::InvalidBar { .. } => "invalid_bar",
            Error::DuplicateDate(_) => "duplicate_date",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::OutOfBounds(_) => "out_of_bounds",
            Error::Domain(_) => "domain",
            Error::Validation(_) => "validation",
            Error::MissingField(_) => "missing_field",
            Error::UnknownEnum { .. } => "unknown_enum",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Forecaster(_) => "forecaster",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
