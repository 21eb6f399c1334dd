use thiserror::Error;

/// Errors produced while loading inputs or running a simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("scenario schema violation: {0}")]
    Schema(String),
    #[error("empty scenario")]
    EmptyScenario,
    #[error("duplicate model id `{0}`")]
    DuplicateModel(String),
    #[error("unknown model id `{0}` in cascade")]
    UnknownCascade(String),
    #[error("cyclic cascade through `{0}`")]
    CyclicCascade(String),

    #[error("malformed latency row {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("non-positive latency {latency} for {key}")]
    NonPositiveLatency { key: String, latency: f64 },
    #[error("ragged bucket coverage for {0}")]
    RaggedCoverage(String),
    #[error("backend unsupported for model: {0}")]
    BackendUnsupported(String),
    #[error("context {context} exceeds the largest bucket {max}")]
    ContextOutOfRange { context: u32, max: u32 },

    #[error("no backends configured")]
    NoBackends,
    #[error("request {0} is already finished")]
    RequestFinished(u64),
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("reports come from different scenarios: `{0}` and `{1}`")]
    MixedScenarios(String, String),
    #[error("instance too large: {0}")]
    InstanceTooLarge(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
