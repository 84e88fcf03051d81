use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("model: {0}")]
    Model(String),

    #[error("checkpoint field `{field}`: {detail}")]
    Checkpoint { field: &'static str, detail: String },

    #[error("cifar: {0}")]
    Cifar(String),

    #[error("divergence at epoch {epoch}, step {step}: non-finite loss {value}")]
    Divergence { epoch: usize, step: usize, value: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidArgument { op, detail: detail.into() }
}
