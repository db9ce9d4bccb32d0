use std::path::PathBuf;

/// Errors produced by the change-segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("query error: {0}")]
    Query(String),
    #[error("scene spec error: {0}")]
    Spec(String),
    #[error("point outside grid extent: {0}")]
    Extent(String),
    #[error("missing prerequisite: {0}")]
    Dependency(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("tensor error: {0}")]
    Tensor(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("unmapped cluster ids: {0:?}")]
    Unmapped(Vec<u32>),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
