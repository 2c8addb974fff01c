use thiserror::Error;

use crate::compiler::CompileReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Two independently computed quantities that must agree did not.
    #[error("invariant violated at layer {layer}: {what} (discrepancy {discrepancy:e})")]
    Invariant {
        layer: usize,
        what: String,
        discrepancy: f64,
    },

    #[error("compiled network failed certification: max probe error {:e}", .0.max_abs_error)]
    Compile(Box<CompileReport>),

    #[error("parse error at {position}: {message}")]
    Parse { position: String, message: String },

    #[error("training failed: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the failure is numerical (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::Invariant { .. } | Error::Compile(_) | Error::Training(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
