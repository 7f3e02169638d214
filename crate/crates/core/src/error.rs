use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("row {row}, column '{column}': cannot parse '{value}'")]
    UnparseableCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}, column '{column}': unknown categorical level '{value}'")]
    UnknownLevel {
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),

    #[error("intervention does not match scenario: {0}")]
    InterventionMismatch(String),

    #[error("exact evaluation requires a discrete spec (no gaussian covariates)")]
    ExactRequiresDiscrete,

    #[error("exact evaluation would enumerate {0} configurations; limit is {1}")]
    EnumerationTooLarge(u128, u128),

    #[error("invalid regression task: {0}")]
    InvalidTask(String),

    #[error("all observation weights are zero")]
    AllZeroWeights,

    #[error("non-finite feature value at row {0}")]
    NonFiniteFeature(usize),

    #[error("learner '{learner}' needs at least {needed} rows, got {got}")]
    TooFewRows {
        learner: String,
        needed: usize,
        got: usize,
    },

    #[error("fold count {v} exceeds the number of distinct clusters {clusters}")]
    TooManyFolds { v: usize, clusters: usize },

    #[error("super learner configuration invalid: {0}")]
    InvalidSuperLearner(String),

    #[error("all library learners failed: {0}")]
    AllLearnersFailed(String),

    #[error("empty fitting subpopulation for {0}")]
    EmptySubpopulation(String),

    #[error("empty stratum: {0}")]
    EmptyStratum(String),

    #[error("time-varying covariates missing inside fitting subpopulation (row {0})")]
    MissingTimeVarying(usize),

    #[error("adjustment feature '{0}' not in dataset schema")]
    UnknownFeature(String),

    #[error("fluctuation did not converge at level {0}")]
    FluctuationDiverged(String),

    #[error("zero denominator in ratio estimand")]
    ZeroDenominator,

    #[error("estimate must be positive for log transform, got {0}")]
    NonPositiveEstimate(f64),

    #[error("standard error requires at least 2 clusters, got {0}")]
    TooFewClusters(usize),

    #[error("confidence level must be in (0,1), got {0}")]
    BadConfidenceLevel(f64),

    #[error("record {0} has no cluster assignment")]
    UnmappedParticipant(usize),

    #[error("dataset failed validation: {0}")]
    ValidationFailed(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
