use thiserror::Error;

/// Errors surfaced by inference, parameter maps, and file I/O.
#[derive(Error, Debug)]
pub enum SvaeError {
    #[error("matrix not symmetric positive definite in {0}")]
    NotSpd(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("family mismatch: {0}")]
    FamilyMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input on or outside the constraint boundary: {0}")]
    Boundary(String),
    #[error("non-finite value in {context} at iteration {iter}")]
    NonFinite { context: &'static str, iter: usize },
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad magic bytes: expected {expected}")]
    MagicMismatch { expected: &'static str },
    #[error("file length inconsistent with header: {0}")]
    Length(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SvaeError>;
