//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enumeration.
#[derive(Debug, Error)]
pub enum Error {
    /// A field evaluation produced a non-finite value.
    #[error("non-finite {what} at point {point:?}")]
    NonFinite { what: String, point: Vec<f64> },

    /// Expression syntax error with the byte offset of the offending token.
    #[error("syntax error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Runtime domain error inside an expression (log of non-positive,
    /// division by zero, fractional power of a non-positive base).
    #[error("domain error at byte {offset}: {message}")]
    ExprDomain { offset: usize, message: String },

    /// A matrix field violated its declared symmetry tag.
    #[error("{tag} violation at point {point:?}: {detail}")]
    SymmetryViolation {
        tag: &'static str,
        point: Vec<f64>,
        detail: String,
    },

    /// A frame does not reconstruct the co-metric at a point.
    #[error("frame/co-metric mismatch at point {point:?}: |sum A_i A_i^T - K| = {residual:.3e}")]
    FrameMismatch { point: Vec<f64>, residual: f64 },

    /// Newton projection onto an energy shell failed.
    #[error("energy projection failed at point {point:?}: {message}")]
    ProjectionFailed { point: Vec<f64>, message: String },

    /// An integrator stage produced a non-finite state.
    #[error("integration step failed at stage {stage}: non-finite state")]
    StepFailed { stage: usize },

    /// Grid request exceeds the supported size.
    #[error("grid refused: {message}")]
    GridRefused { message: String },

    /// Diffeomorphism inverse did not round-trip.
    #[error("diffeomorphism inverse failed at point {point:?}: {message}")]
    InverseFailed { point: Vec<f64>, message: String },

    /// System construction / configuration problem.
    #[error("invalid system: {0}")]
    InvalidSystem(String),

    /// Configuration problem (missing key, dimension mismatch, ...).
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn non_finite(what: impl Into<String>, point: &nalgebra::DVector<f64>) -> Self {
        Error::NonFinite {
            what: what.into(),
            point: point.iter().copied().collect(),
        }
    }
}
