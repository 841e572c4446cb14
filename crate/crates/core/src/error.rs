use thiserror::Error;

/// Errors surfaced by the library.
///
/// The variants are grouped by what the caller can do about them: `Domain`
/// means an argument violated a documented precondition, `Data` means the
/// input (file, graph, label set) is unusable, `Numerical` means a
/// computation degenerated at runtime (zero intensity, singular system),
/// and the rest are I/O plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint version {found} is not supported (this build reads version {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("missing stage dependency: {0}")]
    StageDependency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
