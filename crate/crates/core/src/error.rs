use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("fully masked row {row} in {op}")]
    FullyMaskedRow { op: &'static str, row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice on the same tape")]
    TapeConsumed,
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sample has no present modality")]
    NoModality,
    #[error("label out of range: {0}")]
    LabelOutOfRange(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty validation set")]
    EmptyValSet,
    #[error("validation loss diverged (NaN) at outer step {0}")]
    SearchDiverged(usize),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
