use thiserror::Error;

/// Errors produced by the analysis engine.
///
/// Every variant is a domain error: the inputs were well-formed Rust values but
/// violated a precondition of the requested operation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("duplicate {kind} identifier `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("unknown {kind} identifier `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("factor `{0}` has no levels")]
    EmptyFactor(String),

    #[error("factor `{0}` not found")]
    UnknownFactor(String),

    #[error("level `{level}` not present in factor `{factor}`")]
    UnknownLevel { factor: String, level: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dataset contains missing values; impute them first")]
    MissingValues,

    #[error("variable `{0}` has no observed values")]
    NoObservedValues(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index {index} out of range 1..={rank}")]
    IndexOutOfRange { index: usize, rank: usize },

    #[error("neighbor graph is disconnected into {} components", .components.len())]
    DisconnectedGraph { components: Vec<Vec<usize>> },

    #[error("matrix is not a valid {kind}: {reason}")]
    InvalidMatrix { kind: &'static str, reason: String },

    #[error("session error: {0}")]
    Session(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Stable machine-readable identifier of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::DuplicateId { .. } => "duplicate_id",
            Error::UnknownId { .. } => "unknown_id",
            Error::EmptyFactor(_) => "empty_factor",
            Error::UnknownFactor(_) => "unknown_factor",
            Error::UnknownLevel { .. } => "unknown_level",
            Error::Dimension(_) => "dimension",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::MissingValues => "missing_values",
            Error::NoObservedValues(_) => "no_observed_values",
            Error::Degenerate(_) => "degenerate",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::DisconnectedGraph { .. } => "disconnected_graph",
            Error::InvalidMatrix { .. } => "invalid_matrix",
            Error::Session(_) => "session",
            Error::Serde(_) => "serde",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
