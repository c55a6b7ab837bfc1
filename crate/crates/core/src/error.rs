use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered{}", location.as_ref().map(|l| format!(" in {l}")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        location: Option<String>,
    },

    #[error("backward: {0}")]
    Backward(String),

    #[error("fft: {0}")]
    Fft(String),

    #[error("codec: {0}")]
    Codec(String),

    #[error("model: {0}")]
    Model(String),

    #[error("rollout diverged at step {step}: |u| = {magnitude:e} exceeds bound {bound:e}")]
    Divergence {
        step: usize,
        magnitude: f64,
        bound: f64,
    },

    #[error("datagen: {0}")]
    Datagen(String),

    #[error("stability bound violated: {0}")]
    Stability(String),

    #[error("archive {path}: {msg}")]
    Archive { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training: {0}")]
    Training(String),

    #[error("aligner: {0}")]
    Aligner(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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
