use thiserror::Error;

/// Errors produced across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("midi parse error at byte {offset}: {message}")]
    MidiParse { offset: usize, message: String },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("expected {expected} elements, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("point at infinity: homogeneous coordinate {0:e}")]
    PointAtInfinity(f64),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("QP did not converge after {iterations} iterations (KKT residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("non-finite return {value} for parameter sample {sample} at iteration {iteration}")]
    NonFiniteReturn {
        iteration: usize,
        sample: usize,
        value: f64,
    },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: line {line}: {message}")]
    Csv {
        context: String,
        line: usize,
        message: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn at_frame(self, frame: usize) -> Self {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MidiParse { .. } => "midi_parse",
            Error::Index { .. } => "index",
            Error::Arity { .. } => "arity",
            Error::Degenerate(_) => "degenerate",
            Error::PointAtInfinity(_) => "point_at_infinity",
            Error::Input(_) => "input",
            Error::Convergence { .. } => "convergence",
            Error::Frame { source, .. } => source.kind(),
            Error::State(_) => "state",
            Error::Divergence { .. } => "divergence",
            Error::NonFiniteReturn { .. } => "non_finite_return",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Csv { .. } => "csv",
        }
    }
}
