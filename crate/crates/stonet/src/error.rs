//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Diagnostic payloads
//! (solver residual histories, offending shapes, byte offsets) ride along in
//! the variants so callers can report failures without re-deriving context.

use thiserror::Error;

/// Unified error type for configuration, numerical, and I/O failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A user-supplied configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Tensor or field shapes do not line up; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An iterative linear solve failed to reach its tolerance. Carries the
    /// tail of the residual history for diagnosis.
    #[error("linear solver stalled in {context}: relative residual {final_residual:.3e} after {iterations} iterations (target {tolerance:.1e}); residual tail {history:?}")]
    SolverStalled {
        /// Which solve failed (e.g. "pressure", "transport step 17").
        context: String,
        /// Iterations performed before giving up.
        iterations: usize,
        /// Relative residual at the final iterate.
        final_residual: f64,
        /// Requested relative tolerance.
        tolerance: f64,
        /// Last few relative residuals, oldest first.
        history: Vec<f64>,
    },

    /// A numerical invariant was violated (NaN gradient, non-finite field...).
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Binary or JSON artifact on disk does not match its documented layout.
    #[error("artifact format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
