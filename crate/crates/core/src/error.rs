use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: malformed JSON: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{location}: invalid field `{field}`: {message}")]
    Validation {
        location: String,
        field: String,
        message: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("capacity: {0}")]
    Capacity(String),

    #[error("assembly: {0}")]
    Assembly(String),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("input length {len} exceeds max_positions {max}")]
    Length { len: usize, max: usize },

    #[error("loss mask has no target positions")]
    EmptyMask,

    #[error("non-finite gradient in tensor `{tensor}` at index {index}")]
    NonFiniteGradient { tensor: String, index: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("config: {0}")]
    Config(String),

    #[error("binary format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// An error raised inside one few-shot run.
    #[error("run {run}: {source}")]
    Run {
        run: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn validation(
        location: impl Into<String>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Validation {
            location: location.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn in_run(self, run: impl Into<String>) -> Self {
        Error::Run {
            run: run.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI for error lines and exit status.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "E_PARSE",
            Error::Validation { .. } => "E_VALIDATION",
            Error::Unsupported(_) => "E_UNSUPPORTED",
            Error::Capacity(_) => "E_CAPACITY",
            Error::Assembly(_) => "E_ASSEMBLY",
            Error::Vocab(_) => "E_VOCAB",
            Error::Length { .. } => "E_LENGTH",
            Error::EmptyMask => "E_EMPTY_MASK",
            Error::NonFiniteGradient { .. } => "E_NONFINITE",
            Error::Divergence { .. } => "E_DIVERGENCE",
            Error::UndefinedMetric(_) => "E_UNDEFINED_METRIC",
            Error::Config(_) => "E_CONFIG",
            Error::Format(_) => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Run { source, .. } => source.code(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation { .. } => 2,
            Error::Io { .. } => 3,
            Error::Capacity(_) => 4,
            Error::Parse { .. } | Error::Json(_) | Error::Format(_) => 5,
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } => 6,
            Error::Run { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
