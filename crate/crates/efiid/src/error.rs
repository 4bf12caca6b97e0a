use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point {0:?} lies outside the region")]
    OutsideRegion(Vec<i64>),

    #[error("edge indicator has length {got}, expected {expected}")]
    EdgeCountMismatch { got: usize, expected: usize },

    #[error("digit depth k = {0} exceeds the scaled-integer range")]
    DigitOverflow(u32),

    #[error("uniform {0} outside [0, 1]")]
    UniformOutOfRange(f64),

    #[error("residual law not monotone: cell law does not dominate (1 - eps) * uniform (eps = {eps}, k = {k})")]
    DominationViolated { eps: f64, k: u32 },

    #[error("vertex {site} has no value for neighbor direction {dir}")]
    MissingNeighbor { site: usize, dir: usize },

    #[error("cluster reached the edge of the declared region")]
    ClusterEscapes,

    #[error("sandwich order violated at site {site} at time {time}")]
    OrderViolation { site: usize, time: f64 },

    #[error("coarse cluster touches the window boundary; enlarge the window")]
    WindowTooSmall,

    #[error("sample is degenerate: {0}")]
    DegenerateSample(String),

    #[error("quadrature did not reach tolerance {tol:e} (last change {change:e})")]
    QuadratureNotConverged { tol: f64, change: f64 },

    #[error("instance too large: {0}")]
    InstanceTooLarge(String),

    #[error("acceptance rate {0:e} below 1e-6")]
    AcceptanceTooLow(f64),

    #[error("no coalescence by time {0}")]
    Timeout(f64),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
