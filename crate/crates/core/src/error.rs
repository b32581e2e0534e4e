use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("illegal raw value {raw:?} for answer domain {domain}")]
    IllegalRawValue { raw: String, domain: String },

    #[error("query {0} has already been asked")]
    DuplicateQuery(usize),

    #[error("query id {id} out of range for a query set of size {size}")]
    UnknownQuery { id: usize, size: usize },

    #[error("invalid query set: {0}")]
    InvalidQuerySet(String),

    #[error("invalid posterior: {0}")]
    InvalidPosterior(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("every query is masked")]
    AllQueriesMasked,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("biased sampling requires a querier")]
    MissingQuerier,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("no unasked queries remain")]
    QueriesExhausted,

    #[error("invalid stopping rule: {0}")]
    InvalidStoppingRule(String),

    #[error("history has zero probability under the model")]
    ZeroProbabilityHistory,

    #[error("query {0} already asked in this history")]
    QueryAlreadyAsked(usize),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("domain violation at line {line}, column {column}: {value:?} is not a {domain} answer")]
    DomainViolation {
        line: usize,
        column: usize,
        value: String,
        domain: String,
    },

    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),

    #[error("accuracy curve is incomplete: expected {expected} budgets, got {found}")]
    IncompleteCurve { expected: usize, found: usize },

    #[error("query set mismatch: {0}")]
    QuerySetMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
