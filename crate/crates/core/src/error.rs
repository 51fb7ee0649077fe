use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants are grouped so callers can map them to
/// distinct exit codes: invalid input, violated map invariants, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite coordinate in input point ({0}, {1}, {2})")]
    NonFinitePoint(f64, f64, f64),

    #[error("transform is not rigid: {0}")]
    NonRigidTransform(String),

    #[error("frame {frame_id}: {message}")]
    FrameInput { frame_id: u64, message: String },

    #[error("manifest {path}: line {line}: {message}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("class table {path}: line {line}: {message}")]
    ClassTableParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown class id {0}")]
    UnknownClass(u16),

    #[error("unknown submap id {0}")]
    UnknownSubmap(u16),

    #[error("ply {path}: {message}")]
    PlyFormat { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate scene description: {0}")]
    DegenerateScene(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("archive {path}: unsupported format version {found} (supported: {supported})")]
    ArchiveVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("archive {path}: checksum mismatch in section `{section}`")]
    ArchiveChecksum { path: PathBuf, section: &'static str },

    #[error("archive {path}: truncated or corrupt ({message})")]
    ArchiveTruncated { path: PathBuf, message: String },

    #[error("map invariant violated: {0}")]
    InvariantViolation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by the CLI to pick an exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. }
            | Error::ArchiveChecksum { .. }
            | Error::ArchiveTruncated { .. }
            | Error::ArchiveVersion { .. } => ErrorCategory::Io,
            Error::InvariantViolation(_) => ErrorCategory::Invariant,
            _ => ErrorCategory::Input,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Invariant,
    Io,
}

pub type Result<T> = std::result::Result<T, Error>;
