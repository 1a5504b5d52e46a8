use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("activation trace missing or does not match the network")]
    TraceMissing,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no pixel qualifies for initialization (mask or depth empty)")]
    EmptyInit,

    #[error("backward pass requested but forward ran without a workspace")]
    WorkspaceMissing,

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("degenerate depth: maximum {0} is not positive")]
    DegenerateDepth(f64),

    #[error("no trained embeddings available")]
    NoTrainedEmbeddings,

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("bad manifest: {0}")]
    BadManifest(String),

    #[error("bad synthetic dataset spec: {0}")]
    BadSpec(String),

    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),

    #[error("checkpoint truncated")]
    Truncated,

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
