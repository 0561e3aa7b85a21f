//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming both sides.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Convolution/pooling geometry that cannot produce a valid output.
    #[error("bad geometry: {0}")]
    Geometry(String),

    /// Invalid configuration (model spec, activation-net config, CLI flags).
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed or missing dataset files.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite loss or gradient during training.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// An operation was called outside its contract (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
