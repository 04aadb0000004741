use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

/// Every failure the library can surface.
///
/// The CLI maps these onto its exit codes: configuration problems
/// ([`LabError::is_config_error`]) exit with 2, divergence with 3.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("parameter `{name}` = {value} violates {constraint}")]
    ParameterDomain {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    /// A named inequality required by a bound or a simulation failed.
    #[error("precondition {condition} failed: {detail}")]
    Precondition {
        condition: &'static str,
        detail: String,
    },

    #[error("meta-covariance entry mu[{index}] = {value} is not positive (increase n)")]
    NonPositiveMetaCovariance { index: usize, value: f64 },

    #[error("SGD diverged at iteration t = {t}: |omega| = {norm} exceeds {limit}")]
    Diverged { t: usize, norm: f64, limit: f64 },

    #[error("empty risk curve")]
    EmptyCurve,

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub fn precondition(condition: &'static str, detail: impl Into<String>) -> Self {
        LabError::Precondition {
            condition,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the supplied configuration rather than by
    /// the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            LabError::ParameterDomain { .. }
                | LabError::DimensionMismatch { .. }
                | LabError::InvalidSpectrum(_)
                | LabError::Precondition { .. }
                | LabError::NonPositiveMetaCovariance { .. }
                | LabError::InvalidPlan(_)
                | LabError::Parse { .. }
        )
    }
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(LabError::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
