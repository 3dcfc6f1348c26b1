use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate sample pair: z and z' coincide")]
    DegeneratePair,

    #[error("training diverged at step {step} (member {member}): non-finite loss")]
    Divergence { step: usize, member: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("degenerate reward range: all observed returns are identical")]
    DegenerateRange,

    #[error("invalid state: {0}")]
    State(String),

    #[error("utility index {0} cannot be letter-encoded (maximum is 25)")]
    UnsupportedIndex(usize),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid style id {id} (environment has {count} styles)")]
    InvalidStyle { id: usize, count: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn at_line(self, line: usize) -> Self {
        Error::AtLine {
            line,
            source: Box::new(self),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnsupportedIndex(_) | Error::Validation(_) => 1,
            Error::Divergence { .. } | Error::DegenerateRange => 3,
            Error::AtLine { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
