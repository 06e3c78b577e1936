//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the library.
///
/// The variants map onto the harness exit-code classes: invalid arguments and
/// configuration problems are usage errors, capability and degenerate-edge
/// errors indicate a request outside the supported envelope, and tolerance
/// breaches are reported by the verification commands.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Request exceeds a configured capability (maximum degree, oracle range).
    #[error("capability exceeded: {0}")]
    Capability(String),

    /// A zero-length edge reached the equivariant kernel.
    #[error("degenerate edge between coincident points (edge {edge}): kernel direction undefined")]
    DegenerateEdge { edge: usize },

    /// A configuration value is invalid; names the offending field.
    #[error("invalid configuration: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Array shape mismatch in a tape primitive; names the primitive.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Non-finite values where finite ones are required.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// A verification residual exceeded its tolerance.
    #[error("tolerance breach in check `{check}`: residual {residual:.3e} > {tolerance:.3e}")]
    Tolerance {
        check: String,
        residual: f64,
        tolerance: f64,
    },

    /// Filesystem or serialization failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input data (JSONL point clouds, datasets, checkpoints).
    #[error("malformed data in {context}: {detail}")]
    Malformed { context: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
