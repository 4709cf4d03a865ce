use thiserror::Error;

/// Errors raised by the estimator and its supporting numerics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("series did not converge within {max_index} terms ({context})")]
    NonConvergence { max_index: usize, context: String },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("sample has no positive observations")]
    AllZeros,

    #[error("second derivative of the target is required but unavailable")]
    MissingDerivative,

    #[error("curvature functional vanishes; optimal bandwidth undefined")]
    DegenerateCurvature,

    #[error("density functional diverges: {0}")]
    DivergentFunctional(String),

    #[error("evaluation grid leaves {tail_mass:.3e} of target mass uncovered")]
    GridTooNarrow { tail_mass: f64 },

    #[error("grids do not match: {0}")]
    GridMismatch(String),

    #[error("quadrature failed: {0}")]
    Quadrature(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
