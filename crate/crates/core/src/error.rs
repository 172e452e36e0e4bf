use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An operation produced (or was fed) a non-finite value.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed serialized data (RLE counts, tensor files, records).
    #[error("format error: {0}")]
    Format(String),

    /// Configuration failed validation; one entry per offending field.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    /// The remote scorer could not be reached or timed out.
    #[error("scorer transport error: {0}")]
    Transport(String),

    /// The remote scorer replied with something other than the agreed contract.
    #[error("scorer protocol error: {0}")]
    Protocol(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// Synthetic scene generation failed to place shapes.
    #[error("generation failed for seed {seed}: {detail}")]
    Generation { seed: u64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
