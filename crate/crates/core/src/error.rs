use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("point {point:?} lies outside the domain ({what})")]
    OutsideDomain { point: Vec<f64>, what: String },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("missing certificate: {0}")]
    MissingCertificate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown subequation `{0}`")]
    UnknownSubequation(String),

    #[error("unknown field family `{0}`")]
    UnknownFamily(String),

    #[error("minimizer {gamma:?} is within {margin} of the fiber box boundary")]
    BoundaryMinimizer { gamma: Vec<f64>, margin: f64 },

    #[error("validation failed: {0}")]
    ValidationFailed(String),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("contraction ratio {ratio} exceeds the certified bound {bound}")]
    ContractionViolated { ratio: f64, bound: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
