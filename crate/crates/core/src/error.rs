//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensorLength { shape: Vec<usize>, len: usize },

    #[error("division by zero at element {index}")]
    DivisionByZero { index: usize },

    #[error("square root of negative value {value} at element {index}")]
    NegativeSqrt { value: f64, index: usize },

    #[error("non-finite value in {context} at element {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("binary16 pattern {pattern:#06x} is NaN; payloads must be numeric")]
    NanPattern { pattern: u16 },

    #[error("epoch must be nonnegative, got {epoch}")]
    NegativeEpoch { epoch: f64 },

    #[error("invalid hyperparameter {name} = {value}")]
    InvalidHyper { name: &'static str, value: f64 },

    #[error("epoch {epoch} outside schedule range [0, {total_epochs})")]
    EpochOutOfRange { epoch: f64, total_epochs: f64 },

    #[error("schedule needs at least {min} epochs, got {got}")]
    TooFewEpochs { min: u32, got: u32 },

    #[error("batch size {batch} too small for batch statistics (need >= 2)")]
    BatchTooSmall { batch: usize },

    #[error("evaluation requested before statistics sync")]
    MissingSyncedStats,

    #[error("worker {worker} has no batch statistics to synchronize")]
    UnpopulatedStats { worker: usize },

    #[error("all-reduce needs at least one payload")]
    EmptyAllReduce,

    #[error("cost model requires {name} >= 0, got {value}")]
    InvalidCostModel { name: &'static str, value: f64 },

    #[error("cost model fit needs >= 3 distinct worker counts, got {distinct}")]
    UnderdeterminedFit { distinct: usize },

    #[error("singular system while fitting cost model")]
    SingularFit,

    #[error("wire format error: {0}")]
    Wire(String),

    #[error("invalid model spec: {0}")]
    ModelSpec(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("non-finite training loss at iteration {iteration} ({context})")]
    DivergedLoss { iteration: u64, context: String },

    #[error("parameter divergence across replicas: {param} differs on worker {worker}")]
    ReplicaDivergence { param: String, worker: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
