use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid speed field: {0}")]
    InvalidSpeed(String),

    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),

    #[error("invalid detector configuration: {0}")]
    InvalidDetector(String),

    #[error("detector point ({x:.4}, {y:.4}) lies outside the grid interior (absorbing band starts at {limit:.4})")]
    DetectorInBand { x: f64, y: f64, limit: f64 },

    #[error("CFL violation: dt = {dt:.6e} exceeds limit {limit:.6e}")]
    Cfl { dt: f64, limit: f64 },

    #[error("non-finite field value at step {step} (t = {t:.4}); check the time step and PML parameters")]
    NonFinite { step: usize, t: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("lattice too small: {0}")]
    LatticeTooSmall(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "iteration diverged: misfit increased for 3 consecutive iterations (last {last:.6e} at iteration {iteration})"
    )]
    Divergence { iteration: usize, last: f64 },

    #[error("conjugate gradient breakdown at iteration {0}: zero curvature direction")]
    Breakdown(usize),
}
