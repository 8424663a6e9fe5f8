//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad family an error belongs to. The command-line driver maps each
/// family onto a distinct process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    /// Bad input, configuration, or a violated precondition.
    Usage,
    /// Filesystem and parse failures.
    Io,
    /// Non-finite values, degenerate geometry, failed integration.
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("invalid discrete state {state} for a space with {num_real} real states")]
    InvalidState { state: usize, num_real: usize },

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("time {t} outside the domain of {op}")]
    Domain { op: &'static str, t: f64 },

    #[error("step size too large: stay probability {stay} after clipping")]
    StepSize { stay: f64 },

    #[error("character {ch:?} is not in the co-evolution vocabulary")]
    Vocabulary { ch: char },

    #[error("empty alignment: {0}")]
    EmptyAlignment(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid molecular graph: {0}")]
    Graph(String),

    #[error("non-finite value produced in stage `{stage}`")]
    Numeric { stage: String },

    #[error("sampling failed at step {step}: {reason}")]
    Sampling { step: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty pocket: no residue within {radius} Å of the ligand")]
    EmptyPocket { radius: f64 },

    #[error("character {ch:?} is not an amino-acid letter")]
    Alphabet { ch: char },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::Io { .. } | Error::Parse { .. } => ErrorFamily::Io,
            Error::Numeric { .. }
            | Error::Sampling { .. }
            | Error::DegenerateGeometry(_)
            | Error::StepSize { .. } => ErrorFamily::Numeric,
            _ => ErrorFamily::Usage,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
