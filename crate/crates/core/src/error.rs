use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph has a cycle through node {0}")]
    Cycle(u32),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported op: {0}")]
    UnsupportedOp(String),
    #[error("emit error: {0}")]
    Emit(String),
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("read of unwritten crossbar cell (core {core}, xb {xb}, row {row}, col {col})")]
    UnwrittenCell { core: u32, xb: u32, row: u32, col: u32 },
    #[error("address out of range: {0}")]
    AddressOutOfRange(String),
    #[error("parallel conflict: {0}")]
    ParallelConflict(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("flow was compiled for arch {flow}, got {arch}")]
    HashMismatch { flow: String, arch: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Capacity(_) => 3,
            Error::UnwrittenCell { .. }
            | Error::AddressOutOfRange(_)
            | Error::ParallelConflict(_)
            | Error::MissingTensor(_)
            | Error::HashMismatch { .. } => 4,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
