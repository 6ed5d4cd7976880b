use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,

    #[error("graph is not topologically ordered at node {0}")]
    Cycle(usize),

    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite model output at batch row {row}")]
    NonFiniteOutput { row: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data at line {line}: {msg}")]
    Data { line: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
