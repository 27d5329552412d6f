use thiserror::Error;

/// Errors produced by the estimation and planning pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("function evaluated to a non-finite value at a probe point")]
    NonFinite,

    #[error("need at least {required} detections, got {got}")]
    InsufficientDetections { required: usize, got: usize },

    #[error("need at least {required} visible features, got {got}")]
    InsufficientVisibility { required: usize, got: usize },

    #[error("degenerate geometry: normal matrix condition number {condition:.3e}")]
    SingularGeometry { condition: f64 },

    #[error("pose solver did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("pitch {pitch:.4} rad is too close to gimbal lock")]
    GimbalLock { pitch: f64 },

    #[error("covariance trace must be positive, got {0}")]
    InvalidCovariance(f64),

    #[error("range {range} m outside sensor limits [{min}, {max}]")]
    OutOfRange { range: f64, min: f64, max: f64 },

    #[error("query ({x}, {y}) lies outside the grid domain")]
    OutsideDomain { x: f64, y: f64 },

    #[error("candidate waypoint is not in the feasible set")]
    InfeasibleCandidate,

    #[error("no feasible candidate waypoint within the step radius")]
    NoFeasibleCandidate,

    #[error("localization failed at {count} consecutive waypoints (last: {last})")]
    LocalizationLost { count: usize, last: String },

    #[error("linear algebra failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
