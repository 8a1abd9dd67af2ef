use thiserror::Error;

/// Errors shared across the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    /// A state-space point fell outside the chart of its manifold factor.
    #[error("point outside chart bounds: {0}")]
    OutOfChart(String),

    /// Rejection sampling exhausted its attempt budget.
    #[error("sampling failed after {attempts} attempts: {context}")]
    Sampling { attempts: usize, context: String },

    /// A particle ended up on the wrong side of a camera focal plane.
    #[error("projection failed: {0}")]
    Projection(String),

    /// A query point was too far from every landmark to embed.
    #[error("extrapolation outside sampled region: nearest landmark at {nearest:.6}, threshold {threshold:.6}")]
    Extrapolation { nearest: f64, threshold: f64 },

    /// An eigen- or singular-value decomposition did not converge.
    #[error("decomposition failed: {0}")]
    Eigen(String),

    /// Parallel transport left the valid region of the grid.
    #[error("transport left the valid region at step {step}")]
    TransportExit { step: usize },

    /// A precondition on operation inputs was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration file or value was rejected.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A binary or text artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
