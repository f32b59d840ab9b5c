use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum RhmError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("capacity violated at level {level}: {parents} parents x {multiplicity} tuples exceeds {available} available tuples")]
    Capacity {
        level: usize,
        parents: usize,
        multiplicity: usize,
        available: usize,
    },

    #[error("uncorrelated construction impossible: {0}")]
    Divisibility(String),

    #[error("out-of-language input: tuple {tuple:?} at level {level} has no parent")]
    OutOfLanguage { level: usize, tuple: Vec<u32> },

    #[error("datum index {index} out of range (P_max = {p_max})")]
    IndexOutOfRange { index: u64, p_max: u64 },

    #[error("requested {requested} points but P_max = {p_max}")]
    TooManyPoints { requested: u64, p_max: u64 },

    #[error("no synonyms exist (m = 1)")]
    NoSynonyms,

    #[error("exact enumeration refused: P_max = {p_max} exceeds guard {guard}; use empirical counts")]
    EnumerationGuard { p_max: u64, guard: u64 },

    #[error("integer overflow computing {0}")]
    Overflow(&'static str),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch} (lr = {lr})")]
    Diverged { epoch: usize, lr: f64 },

    #[error("empty test set")]
    EmptyTestSet,

    #[error("layer {k} out of range 1..={depth}")]
    LayerOutOfRange { k: usize, depth: usize },

    #[error("constant representation: sensitivity denominator vanishes")]
    ConstantRepresentation,

    #[error("clustering needs at least {k} observed tuples, got {observed}")]
    TooFewPoints { k: usize, observed: usize },

    #[error("tuple {0} was not observed in the training data")]
    UnobservedTuple(u32),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt output file, offending lines: {0:?}")]
    CorruptRows(Vec<usize>),

    #[error("malformed weights file: {0}")]
    WeightsFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RhmError>;
