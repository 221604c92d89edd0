use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OngError>;

#[derive(Debug, Error)]
pub enum OngError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("masked-weight nullity violated in layer {layer_id} at {} position(s), first {:?}", .indices.len(), .indices.first())]
    NullityViolation {
        layer_id: String,
        indices: Vec<(usize, usize)>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<OngError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl OngError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        OngError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OngError::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &OngError {
        match self {
            OngError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
