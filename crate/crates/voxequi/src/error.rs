use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum VoxError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported element symbol `{0}`")]
    Element(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("molecule exceeds grid extent: atom {atom} at {dist:.3} A, limit {limit:.3} A")]
    Extent { atom: usize, dist: f64, limit: f64 },

    #[error("numerical divergence at step {step}: {diag}")]
    Divergence { step: usize, diag: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing label: {0}")]
    Label(String),

    #[error("unsupported capability: {0}")]
    Capability(String),

    #[error("noise convention violation: {0}")]
    Convention(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VoxError>;
