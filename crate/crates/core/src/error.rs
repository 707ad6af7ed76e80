use thiserror::Error;

/// Errors raised across the crate. Payloads are carried as `f64` so the enum stays
/// independent of the scalar type a computation ran in.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid state space: {0}")]
    InvalidSpace(String),

    #[error("unsupported boundary on axis {axis}: absorbing boundaries are excluded")]
    UnsupportedBoundary { axis: usize },

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("density not normalized: integral {integral} (tolerance {tolerance})")]
    NotNormalized { integral: f64, tolerance: f64 },

    #[error("region has no support under the density of states")]
    EmptySupport,

    #[error("invalid stochastic matrix: {0}")]
    InvalidStochastic(String),

    #[error("finite-difference stencil leaves the state space at {point:?} (h = {h})")]
    Stencil { point: Vec<f64>, h: f64 },

    #[error("singular law: density of states {mu} below floor at {point:?}")]
    SingularLaw { point: Vec<f64>, mu: f64 },

    #[error("integration aborted at t = {time}: {reason} (last good state {state:?})")]
    IntegrationAborted { time: f64, state: Vec<f64>, reason: String },

    #[error("stiffness: speed {speed} exceeds cap {cap} at t = {time}")]
    Stiffness { time: f64, speed: f64, cap: f64 },

    #[error("trajectory foot {point:?} left the state space on axis {axis}")]
    BoundaryExit { point: Vec<f64>, axis: usize },

    #[error("sampling starved: no sample accepted after {attempts} attempts")]
    SamplingStarved { attempts: usize },

    #[error("incompatible coarse graining: {0}")]
    CoarseGraining(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
