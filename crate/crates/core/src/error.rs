use thiserror::Error;

/// Errors produced by dataset handling, model fitting, and estimator evaluation.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate cell ({user}, {item})")]
    DuplicateCell { user: usize, item: usize },

    #[error("index ({user}, {item}) out of bounds for {num_users} users x {num_items} items")]
    IndexOutOfBounds {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("degenerate base dataset: {0}")]
    DegenerateGeneration(String),

    #[error("probability {value} at cell ({user}, {item}) outside [0, 1]")]
    ProbabilityDomain { user: usize, item: usize, value: f64 },

    #[error("missing MAR sample: {0}")]
    MissingMarSample(String),

    #[error("non-finite value in {context}: parameter {name}")]
    NonFinite { context: String, name: String },

    #[error("singular Gram matrix with lambda = 0; use a positive stabilization lambda")]
    SingularSystem,

    #[error("ideal loss unavailable: dataset has no full rating matrix")]
    OracleUnavailable,

    #[error("undefined estimate: {0}")]
    UndefinedEstimate(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("tail bound inapplicable: {0}")]
    BoundInapplicable(String),

    #[error("sparse data: {0}")]
    SparseData(String),

    #[error("training diverged at round {round}: {message} (best checkpoint restored)")]
    TrainingDiverged { round: usize, message: String },

    #[error("estimator failed in {failures} of {trials} trials (first at trial {first_trial}): {message}")]
    TrialFailures {
        failures: usize,
        trials: usize,
        first_trial: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
