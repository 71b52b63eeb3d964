use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rectangle [{x0}, {x1}] x [{y0}, {y1}]")]
    DegenerateRectangle { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("grid needs at least one cell per axis, got {nx} x {ny}")]
    EmptyGrid { nx: usize, ny: usize },

    #[error("field length {found} does not match vertex count {expected}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite nodal value at index {index}")]
    NonFinite { index: usize },

    #[error("field belongs to a different mesh")]
    MeshMismatch,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("multiplier iteration failed after {iterations} iterations (|dlambda| = {last_change:e})")]
    MultiplierFailed { iterations: usize, last_change: f64 },

    #[error("target mass {target} outside [0, {area}]")]
    TargetMassOutOfRange { target: f64, area: f64 },

    #[error("time {t} outside [0, {end}]")]
    TimeOutOfRange { t: f64, end: f64 },

    #[error("time step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("observation time {time} is not a multiple of the time step {tau}")]
    ObservationOffGrid { time: f64, tau: f64 },

    #[error("geometry extends outside the computational domain")]
    GeometryEscapesDomain,

    #[error("positive-part mass is zero")]
    ZeroMass,

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("problem too large for the dense oracle: {dofs} unknowns (limit {limit})")]
    OracleTooLarge { dofs: usize, limit: usize },

    #[error("{0}")]
    Shape(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors raised by the numerical solvers (as opposed to
    /// configuration or I/O problems).
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::SolverDiverged { .. } | Error::MultiplierFailed { .. } => true,
            Error::AtStep { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
