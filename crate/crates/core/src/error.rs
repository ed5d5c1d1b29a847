use thiserror::Error;

use crate::quadrature::QuadError;
use crate::roots::RootError;

/// Every failure the library reports. `code()` gives the stable
/// machine-readable name used in CLI error documents.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("s = {s} outside the open strip ({lo}, {hi})")]
    StripViolation { s: f64, lo: f64, hi: f64 },
    #[error("beta = {beta} outside (0, {hi})")]
    BadBeta { beta: f64, hi: f64 },
    #[error("exponent is nonnegative on (0, {beta_plus}); no admissible beta")]
    NoSolution { beta_plus: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("factor measure lacks the non-increasing density certificate: {0}")]
    NotPhilanthropic(String),
    #[error("root bracketing failed: {0}")]
    NoRoot(String),
    #[error("factors do not reproduce the exponent: max relative deviation {deviation:e}")]
    InconsistentFactors { deviation: f64 },
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),
    #[error("-phi(k) <= 0 at k = {k}")]
    SignViolation { k: usize },
    #[error("x = {x} outside the raw series radius {radius}")]
    RadiusViolation { x: f64, radius: f64 },
    #[error("moment of order {order} diverges")]
    MomentDivergence { order: f64 },
    #[error("parameter violation: {0}")]
    ParameterViolation(String),
    #[error("series lost {digits:.1} digits to cancellation at x = {x}")]
    CancellationLoss { x: f64, digits: f64 },
    #[error("unkilled process does not drift to -infinity (mean {mean})")]
    UnkilledNonDrifting { mean: f64 },
    #[error("inadmissible stable parameters: {0}")]
    Inadmissible(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::StripViolation { .. } => "STRIP_VIOLATION",
            Error::BadBeta { .. } => "BAD_BETA",
            Error::NoSolution { .. } => "NO_SOLUTION",
            Error::InvalidModel(_) => "INVALID_MODEL",
            Error::NotPhilanthropic(_) => "NOT_PHILANTHROPIC",
            Error::NoRoot(_) => "NO_ROOT",
            Error::InconsistentFactors { .. } => "INCONSISTENT_FACTORS",
            Error::QuadratureFailure(_) => "QUADRATURE_FAILURE",
            Error::SignViolation { .. } => "SIGN_VIOLATION",
            Error::RadiusViolation { .. } => "RADIUS_VIOLATION",
            Error::MomentDivergence { .. } => "MOMENT_DIVERGENCE",
            Error::ParameterViolation(_) => "PARAMETER_VIOLATION",
            Error::CancellationLoss { .. } => "CANCELLATION_LOSS",
            Error::UnkilledNonDrifting { .. } => "UNKILLED_NON_DRIFTING",
            Error::Inadmissible(_) => "INADMISSIBLE",
            Error::Unsupported(_) => "UNSUPPORTED",
        }
    }
}

impl From<QuadError> for Error {
    fn from(e: QuadError) -> Self {
        Error::QuadratureFailure(e.to_string())
    }
}

impl From<RootError> for Error {
    fn from(e: RootError) -> Self {
        Error::NoRoot(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
