use serde::Serialize;
use thiserror::Error;

use shotloc_core::audio::AudioError;
use shotloc_core::ballistics::BallisticsError;
use shotloc_core::fusion::FusionError;
use shotloc_core::geo::GeoError;
use shotloc_core::oracle::OracleError;
use shotloc_core::sync::SyncError;
use shotloc_core::tdoa::TdoaError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Validation(String),
    /// Inputs are well formed but admit no answer.
    #[error("{0}")]
    Infeasible(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("stale version: expected {expected}, store has {actual}")]
    Conflict { expected: u64, actual: u64 },
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Infeasible(_) => "infeasible",
            Error::NotFound(_) => "not_found",
            Error::Conflict { .. } => "conflict",
            Error::Integrity(_) => "integrity",
            Error::UnsupportedFormat(_) => "unsupported_format",
            Error::CorruptFile(_) => "corrupt_file",
            Error::Io(_) => "io",
        }
    }

    /// 1 validation, 2 infeasible result, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) => 2,
            Error::Io(_) | Error::CorruptFile(_) => 3,
            _ => 1,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.to_string())
        } else {
            Error::CorruptFile(e.to_string())
        }
    }
}

impl From<BallisticsError> for Error {
    fn from(e: BallisticsError) -> Self {
        match e {
            BallisticsError::InfeasibleGeometry { .. }
            | BallisticsError::NoFeasibleSamples
            | BallisticsError::SingularSystem => Error::Infeasible(e.to_string()),
            _ => Error::Validation(e.to_string()),
        }
    }
}

impl From<TdoaError> for Error {
    fn from(e: TdoaError) -> Self {
        match e {
            TdoaError::FullyInfeasible { .. } => Error::Infeasible(format!("FullyInfeasible: {e}")),
            _ => Error::Validation(e.to_string()),
        }
    }
}

impl From<FusionError> for Error {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::AllZero => Error::Infeasible(format!("AllZero: {e}")),
            FusionError::EmptyEstimate | FusionError::FullyInfeasible => {
                Error::Infeasible(e.to_string())
            }
            _ => Error::Validation(e.to_string()),
        }
    }
}

impl From<SyncError> for Error {
    fn from(e: SyncError) -> Self {
        match e {
            SyncError::InsufficientOverlap { .. } | SyncError::NoOffsets => {
                Error::Infeasible(e.to_string())
            }
            _ => Error::Validation(e.to_string()),
        }
    }
}

impl From<GeoError> for Error {
    fn from(e: GeoError) -> Self {
        match e {
            GeoError::InfeasibleSeparation { .. } => Error::Infeasible(e.to_string()),
            _ => Error::Validation(e.to_string()),
        }
    }
}

impl From<AudioError> for Error {
    fn from(e: AudioError) -> Self {
        Error::Validation(e.to_string())
    }
}

impl From<OracleError> for Error {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::ConstraintUnsatisfiable(_) => Error::Infeasible(e.to_string()),
            OracleError::Audio(a) => a.into(),
            _ => Error::Validation(e.to_string()),
        }
    }
}
