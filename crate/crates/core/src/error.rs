use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),

    #[error("unknown joint(s) in retargeting table: {}", .0.join(", "))]
    Mapping(Vec<String>),

    #[error("missing argument: {0}")]
    MissingArgument(&'static str),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("timestep {t} out of range 1..={max}")]
    Index { t: usize, max: usize },

    #[error("denoiser failed at step {step}: {source}")]
    Denoiser {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("length error: {0}")]
    Length(String),

    #[error("state error: {0}")]
    State(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("insufficient pool: need at least {needed} samples, got {got}")]
    InsufficientPool { needed: usize, got: usize },

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("plug compatibility error: {0}")]
    Compat(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
