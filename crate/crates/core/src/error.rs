use std::path::PathBuf;

/// Errors produced by the calculator library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape was already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Frozen(String),

    #[error("invalid IDX data: {0}")]
    Idx(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint parameter names do not match the model (missing: {missing:?}, unexpected: {unexpected:?})")]
    NameDelta {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("operand out of range: {0} (expected -99..=99)")]
    OperandRange(i64),

    #[error("loss {name} became non-finite at step {step}")]
    NonFiniteLoss { step: usize, name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to fetch {url}: {detail}")]
    Fetch { url: String, detail: String },

    #[error("MNIST file {} is missing and could not be downloaded: {detail}", path.display())]
    MissingData { path: PathBuf, detail: String },

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn arg_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument {
        op,
        detail: detail.into(),
    })
}
