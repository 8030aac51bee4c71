use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("channel window: (c - chat) = {} is not divisible by g = {g}", .c - .chat)]
    WindowDivisibility { c: usize, chat: usize, g: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint offset {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss at step {step}: task={task_loss} ortho={ortho_loss}")]
    NonFiniteLoss {
        step: usize,
        task_loss: f64,
        ortho_loss: f64,
    },
    #[error("{what}: measured {measured} vs predicted {predicted}")]
    CountMismatch {
        what: String,
        measured: f64,
        predicted: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
