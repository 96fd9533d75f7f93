use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is singular to working precision (pivot {pivot:.3e}, tolerance {tolerance:.3e})")]
    SingularMatrix { pivot: f64, tolerance: f64 },

    #[error("matrix is not Hermitian (relative asymmetry {asymmetry:.3e})")]
    NotHermitian { asymmetry: f64 },

    #[error("all residuals are numerically zero; speckle covariance cannot be updated")]
    DegenerateResiduals,

    #[error("normal matrix for source {source_index}, antenna {antenna} is singular even with ridge {ridge:.1e}")]
    SingularNormalMatrix { source_index: usize, antenna: usize, ridge: f64 },

    #[error("non-finite value produced during {stage}")]
    NonFinite { stage: &'static str },

    #[error("gain denominator vanishes for antenna {antenna}, polarisation {polarisation}")]
    DegenerateGain { antenna: usize, polarisation: usize },

    #[error("phase is undefined for source {source_index}, antenna {antenna} (trace magnitude below tolerance)")]
    DegeneratePhase { source_index: usize, antenna: usize },

    #[error("antenna positions are collinear (Gram determinant {determinant:.3e})")]
    DegenerateGeometry { determinant: f64 },

    #[error("structured calibration failed in cycle {cycle}: {source}")]
    Structured {
        cycle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("signal is identically zero; SNR is undefined")]
    ZeroSignal,

    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("failed to parse {}: {source}", .path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid { field: field.into(), message: message.into() }
    }

    /// True for errors caused by a bad configuration or input file, as opposed
    /// to failures during computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Invalid { .. } | Error::MissingFile(_) | Error::Parse { .. } | Error::Json(_))
    }
}
