//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("size error: expected {expected} values, found {actual}")]
    Size { expected: usize, actual: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("empty selection: mask keeps no voxels")]
    EmptySelection,

    #[error("rank error: {0}")]
    Rank(String),

    #[error("no convergence after {iterations} iterations")]
    Convergence { iterations: usize },

    #[error("ill-conditioned system (condition number {cond:.3e})")]
    Conditioning { cond: f64 },

    #[error("label error: {0}")]
    Label(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("degenerate fold: {0}")]
    Fold(String),

    #[error("phantom spec error: {0}")]
    Spec(String),

    #[error("empty class: {0}")]
    EmptyClass(String),

    #[error("case {id}: {source}")]
    Case {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach a case identifier to an error propagating out of a pipeline stage.
    pub fn for_case(self, id: &str) -> Error {
        Error::Case {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}
