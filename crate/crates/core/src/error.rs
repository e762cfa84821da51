use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    /// A malformed or out-of-order row in an input file.
    #[error("{file}:{line} {message}")]
    Format {
        file: String,
        line: u64,
        message: String,
    },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("data gap of {gap:.3} s at t={at:.6}")]
    DataGap { at: f64, gap: f64 },

    #[error("singular normal equations (lambda={lambda:e}, min diag={min_diag:e}, max diag={max_diag:e})")]
    SingularSystem {
        lambda: f64,
        min_diag: f64,
        max_diag: f64,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("no overlap: {0}")]
    NoOverlap(String),

    #[error("empty association: {0}")]
    EmptyAssociation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("optimization diverged: cost {initial:e} -> {last:e}")]
    Diverged { initial: f64, last: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(file: impl Into<String>, line: u64, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            line,
            message: message.into(),
        }
    }
}
