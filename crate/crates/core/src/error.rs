use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the validation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("curve `{label}` does not cover [{t0}, {t1}]")]
    Coverage { label: String, t0: f64, t1: f64 },

    #[error("event window [{lo}, {hi}] does not intersect curve `{label}`")]
    Window { lo: f64, hi: f64, label: String },

    #[error("degenerate warp: {0}")]
    DegenerateWarp(String),

    #[error("ill-conditioned correlation matrix: {0}")]
    Conditioning(String),

    #[error("emulator fit failed for coefficient {index}: {msg}")]
    Fit { index: String, msg: String },

    #[error("MCMC initialisation failed: {0} (try starting from the prior medians)")]
    Init(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }
}
