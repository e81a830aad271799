use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("point ({lat}, {lon}) lies {distance_km:.1} km from the projection origin")]
    OutOfExtent { lat: f64, lon: f64, distance_km: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("reframe error: {0}")]
    Reframe(String),
    #[error("expected {expected} answer lists, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("invalid mixture parameters: {0}")]
    Parameter(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate support: {0}")]
    DegenerateSupport(String),
    #[error("unknown vocabulary id {0}")]
    Vocabulary(u32),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("non-finite loss in batch {batch}: {detail}")]
    Numerical { batch: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for structured reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedSequence(_) => "malformed_sequence",
            Error::Parse { .. } => "parse",
            Error::OutOfExtent { .. } => "out_of_extent",
            Error::Config(_) => "config",
            Error::Reframe(_) => "reframe",
            Error::Arity { .. } => "arity",
            Error::Consistency(_) => "consistency",
            Error::Parameter(_) => "parameter",
            Error::Argument(_) => "argument",
            Error::DegenerateSupport(_) => "degenerate_support",
            Error::Vocabulary(_) => "vocabulary",
            Error::Length { .. } => "length",
            Error::Numerical { .. } => "numerical",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
