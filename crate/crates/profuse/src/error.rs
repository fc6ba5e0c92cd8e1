use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("unknown dtype code {code} in {path}")]
    UnknownDtype { path: PathBuf, code: u32 },

    #[error("payload short in {path}: expected {expected} bytes, found {found}")]
    PayloadShort {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("shape/payload mismatch: shape {shape:?} implies {expected} elements, payload has {found}")]
    ShapeMismatch {
        shape: Vec<u64>,
        expected: usize,
        found: usize,
    },

    #[error("missing file referenced by manifest: {path}")]
    MissingFile { path: PathBuf },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("embedding dimension mismatch: expected {expected}, found {found} in {context}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("no correspondence passed the confidence threshold; scene would be empty")]
    EmptyScene,

    #[error("missing reciprocal warp for view pair ({src}, {dst})")]
    MissingWarp { src: usize, dst: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate camera layout (seed {seed}): {reason}")]
    DegenerateLayout { seed: u64, reason: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
