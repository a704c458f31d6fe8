use thiserror::Error;

use crate::training::LossTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("population is empty: every per-class count is zero")]
    EmptyPopulation,

    #[error("class {class} has no members")]
    EmptyClass { class: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite fitness {value} at {vector:?}")]
    Fitness { value: f64, vector: Vec<f64> },

    #[error("forward cache does not belong to the current parameters")]
    Cache,

    #[error("non-finite gradient in tensor {tensor}")]
    Grad { tensor: usize },

    #[error("model file: {0}")]
    Persist(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no survivors after {stage}")]
    EmptySurvivors { stage: &'static str },

    #[error("class {class} has only one side present; AUC is undefined")]
    UndefinedAuc { class: usize },

    #[error("training diverged in phase {phase} at step {step}")]
    TrainingDiverged {
        phase: u8,
        step: usize,
        trace: Box<LossTrace>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
