use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand extents disagree with what an operation requires.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A shape is valid on its own but not admissible for the requested
    /// operation (divisibility, resolution, rank).
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN or infinity where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Source extents are not divisible by the target extents.
    #[error("partition error: {0}")]
    Partition(String),

    #[error("tiling error: {0}")]
    Tiling(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    /// Invalid model, training or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed tensor file or checkpoint.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
