use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidOp { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("segment `{0}` produced different outputs on replay")]
    ReplayMismatch(String),

    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("vocab: {0}")]
    Vocab(String),

    #[error("checkpoint plan does not match the model: {0}")]
    PlanMismatch(String),

    #[error("model file: {0}")]
    ModelFile(String),

    #[error("cannot serialize record: {0}")]
    Serialize(String),

    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("non-finite loss at epoch {epoch}, example {example}: {loss}")]
    Diverged { epoch: usize, example: usize, loss: f32 },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
