use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, divisibility, arity).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A non-finite value appeared during evaluation.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },

    /// Malformed or inconsistent on-disk data.
    #[error("format error in {context} at byte offset {offset}: {detail}")]
    Format { context: String, offset: u64, detail: String },

    /// A checkpoint does not match the model it is being loaded into.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// Invalid configuration value.
    #[error("invalid configuration `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { op: op.into(), detail: detail.into() }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { field: field.into(), detail: detail.into() }
    }

    pub(crate) fn format(context: impl Into<String>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { context: context.into(), offset, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}
