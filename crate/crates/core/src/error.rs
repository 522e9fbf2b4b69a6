use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("integration diverged at node {node}")]
    Diverged { node: usize },

    #[error("refused: {0}")]
    Refused(String),

    #[error("unknown problem `{name}`; available: {}", available.join(", "))]
    UnknownProblem {
        name: String,
        available: Vec<String>,
    },

    #[error("internal numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
