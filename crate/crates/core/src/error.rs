use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TrmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TrmError {
    #[error("grid out of bounds: {0}")]
    GridBounds(String),

    #[error("translation ({dx}, {dy}) pushes a {height}x{width} grid past the {side}x{side} canvas")]
    TranslationOverflow {
        dx: usize,
        dy: usize,
        height: usize,
        width: usize,
        side: usize,
    },

    #[error("only {available} distinct augmentations exist, {requested} requested")]
    InsufficientAugmentationSpace { available: u128, requested: usize },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("need at least {needed} tasks, got {got}")]
    TooFewTasks { needed: usize, got: usize },

    #[error("unknown task id `{0}`")]
    UnknownTaskId(String),

    #[error("embedding index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("non-finite loss ({0})")]
    NonFiniteLoss(String),

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("operation requires {expected} embedding mode")]
    ModeMismatch { expected: &'static str },

    #[error("pre-trained embedding table is empty")]
    EmptyPretrainedTable,

    #[error("task-to-embedding mapping lost: {0}")]
    ContinuedPretrainMappingLost(String),

    #[error("reserved inference time {reserved_hours}h leaves no training time out of {wall_hours}h")]
    BudgetExhausted { wall_hours: f64, reserved_hours: f64 },

    #[error("invalid budget input: {0}")]
    InvalidBudget(String),

    #[error("strategy configuration: {0}")]
    StrategyConfig(String),

    #[error("model configuration: {0}")]
    ModelConfig(String),

    #[error("cannot vote over an empty prediction set")]
    EmptyPredictionSet,

    #[error("missing solution for task `{task_id}` test example {example}")]
    MissingSolution { task_id: String, example: usize },

    #[error("{weights} weights for {predictions} predictions")]
    WeightLengthMismatch { weights: usize, predictions: usize },

    #[error("embedding row {0} has zero norm")]
    ZeroNormEmbedding(usize),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("registry format: {0}")]
    RegistryFormat(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrmError::Io {
            path: path.into(),
            source,
        }
    }
}
