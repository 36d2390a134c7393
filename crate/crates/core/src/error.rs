use thiserror::Error;

/// Errors raised by tensor construction, graph recording and gradient evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub type LabResult<T> = std::result::Result<T, Error>;

/// Errors from the modelling, training and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite velocity at sampler step {step}")]
    NonFiniteVelocity { step: usize },
    #[error("evaluation error in {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("non-finite loss at step {step}; first offending sample index {sample}")]
    NonFiniteLoss { step: usize, sample: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
