use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("zero-norm embedding at index {index} (encoder output collapsed to zero)")]
    ZeroNormEmbedding { index: usize },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("invalid epoch language plan: {0}")]
    InvalidPlan(String),

    #[error("distribution support mismatch: {0}")]
    SupportMismatch(String),

    #[error("non-finite value encountered during {0}")]
    NonFinite(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: [u8; 4] },

    #[error("unsupported format version {got} in {path} (supported: {supported})")]
    VersionMismatch {
        path: String,
        got: u32,
        supported: u32,
    },

    #[error("truncated file {path}: needed {needed} more bytes")]
    Truncated { path: String, needed: usize },

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
