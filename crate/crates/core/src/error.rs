use std::io;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// The variants mirror the failure classes callers need to tell apart:
/// container problems (`Format`, `Version`, `Corrupt`), bad values or
/// arguments (`Value`), and structural mismatches (`Shape`, `Range`,
/// `MissingTensor`, `Geometry`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported container version {0}")]
    Version(u32),

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
