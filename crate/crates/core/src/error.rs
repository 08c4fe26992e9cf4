use thiserror::Error;

/// Errors produced by the ordering pipeline.
#[derive(Debug, Error)]
pub enum PoemError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("selection failed: label `{label}` has {available} examples, needs {required}")]
    InsufficientLabel {
        label: String,
        available: usize,
        required: usize,
    },

    #[error("selection failed: {available} examples available, {required} requested")]
    InsufficientExamples { available: usize, required: usize },

    #[error("render failed: placeholder `{placeholder}` cannot be resolved")]
    Render { placeholder: String },

    #[error("backend `{backend}` failed after {attempts} attempt(s): {last}")]
    Backend {
        backend: String,
        attempts: u32,
        last: String,
    },

    #[error("protocol error from `{backend}`: {detail}")]
    Protocol { backend: String, detail: String },

    #[error("unsupported snapshot version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("load error at {context}: {detail}")]
    Load { context: String, detail: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<PoemError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PoemError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PoemError::InvalidInput(msg.into())
    }

    /// Wraps the error with a location description, e.g. `iteration 3, sample 7`.
    pub fn context(self, context: impl Into<String>) -> Self {
        PoemError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &PoemError {
        match self {
            PoemError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = PoemError> = std::result::Result<T, E>;
