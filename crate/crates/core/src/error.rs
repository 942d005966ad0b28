use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("formula error at byte {pos}: {msg}")]
    Formula { pos: usize, msg: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("column `{column}`: {msg}")]
    Column { column: String, msg: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("matrix is not positive definite (leading minor {index} failed)")]
    NotPositiveDefinite { index: usize },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("fixed-point solve did not converge in {iters} iterations (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("edge list contains a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("model error: {0}")]
    Model(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("csv error at line {line}: {msg}")]
    Csv { line: u64, msg: String },

    #[error("checksum mismatch for tensor `{0}`")]
    Checksum(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Process exit status for the command-line tool: 1 for bad input
    /// specifications, 2 for data problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Formula { .. } | Error::Model(_) | Error::Cycle(_) | Error::Domain(_) => 1,
            Error::NonFinite { .. }
            | Error::NanLoss { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::Singular(_)
            | Error::NoConvergence { .. } => 3,
            _ => 2,
        }
    }
}
