//! Error taxonomy shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Array dimensions do not line up; the message names the offending axis.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violates a documented precondition.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A timestep or table index is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// An operation was invoked in the wrong lifecycle state
    /// (e.g. double inflation, stage-order violation).
    #[error("state error: {0}")]
    State(String),

    /// On-disk or in-memory data failed an integrity check
    /// (checksum mismatch, frozen parameter mutated, unknown tag).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// The checkpoint cannot serve the request (e.g. pose input on a
    /// checkpoint that never learned pose control).
    #[error("capability error: {0}")]
    Capability(String),

    /// A referenced file or directory does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// Command line / config schema misuse.
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite loss.
    #[error("divergence: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
