//! Crate-wide error type.
//!
//! Variants are grouped by how callers recover: configuration problems map to
//! CLI exit code 2, everything else to exit code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch shapes do not line up for the requested primitive.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Quantizer parameters outside their domain (non-positive range,
    /// missing ceiling for the asymmetric scheme, ...).
    #[error("invalid quantizer: {0}")]
    InvalidQuantizer(String),

    /// A function argument that is invalid independent of configuration.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Bad run configuration: unknown key, unparseable value, missing
    /// required key, or a semantic constraint violation.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent serialized model container.
    #[error("container error: {0}")]
    Container(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A multi-step pipeline (e.g. a sweep) finished with failed steps.
    #[error("pipeline failure: {0}")]
    Pipeline(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
