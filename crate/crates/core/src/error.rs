use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("index {index} out of range for extent {extent}")]
    OutOfRange { index: usize, extent: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("function is not deterministic: two evaluations at the same point differ")]
    NonDeterministic,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ODE solver exceeded the evaluation budget of {0}")]
    MaxEvals(usize),

    #[error("ODE step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("degenerate Jacobian: |det| = {0:e}")]
    Degenerate(f64),

    #[error("memory guard: {requested} elements exceed the budget of {budget}")]
    MemoryBudget { requested: usize, budget: usize },

    #[error("empty token stream")]
    EmptyStream,

    #[error("stream of {len} tokens is too short for {needed}")]
    StreamTooShort { len: usize, needed: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid UTF-8 input: {0}")]
    Encoding(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
