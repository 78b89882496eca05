use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected a scalar, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("batch too small for {op}: need at least {need} rows, got {got}")]
    BatchTooSmall {
        op: &'static str,
        need: usize,
        got: usize,
    },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    Label {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite value encountered: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema violation at record {record}: {reason}")]
    Schema { record: usize, reason: String },
    #[error("replay buffer is empty")]
    ReplayUnavailable,
    #[error("decode error: {0}")]
    Decode(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("value out of domain: {0}")]
    Value(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
