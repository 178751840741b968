//! Error type shared by every module in this crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied value violates a precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A simplex has too few vertices for the requested computation.
    #[error("simplex has {got} vertices, operation needs at least {needed}")]
    Dimension { needed: usize, got: usize },

    /// Volume at or below the floor; log-volume and its gradient are undefined.
    #[error("degenerate simplex: volume {volume:.3e} at or below floor")]
    DegenerateSimplex { volume: f64 },

    /// A non-finite value appeared mid-computation.
    #[error("numeric failure in {context}")]
    Numeric { context: String },

    /// Gradient-descent training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Training { epoch: usize },

    /// Malformed on-disk container.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Division-by-zero style condition in a reported rate.
    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
