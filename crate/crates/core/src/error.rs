use thiserror::Error;

/// Errors raised by the equilibrium engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("volatility matrix is singular or ill-conditioned at t={t} (condition number {condition:.3e})")]
    SingularVolatility { t: f64, condition: f64 },

    #[error("market price of risk vanishes: min |lambda(t)| = {min_norm:.3e}")]
    DegenerateLambda { min_norm: f64 },

    #[error("Picard iteration diverged at t={t}: residual {residual:.3e} after {iterations} iterations")]
    PicardDivergence {
        t: f64,
        residual: f64,
        iterations: usize,
    },

    #[error("solution invariant violated: {0}")]
    InvariantViolation(String),

    #[error("spatial domain too small: {0}")]
    DomainTooSmall(String),

    #[error("u is not strictly increasing in x: min u_x = {min_ux:.3e}")]
    NonMonotone { min_ux: f64 },

    #[error("value {y} outside the range [{lo}, {hi}] of u(t={t}, .)")]
    OutOfRange { t: f64, y: f64, lo: f64, hi: f64 },

    #[error("path {path} left the spatial grid at t={t} (x={x})")]
    PathOutOfRange { path: usize, t: f64, x: f64 },

    #[error("density lost mass at t={t}: |mass - 1| = {drift:.3e}")]
    MassLoss { t: f64, drift: f64 },

    #[error("density went negative at t={t}: min value {min:.3e}")]
    NegativeDensity { t: f64, min: f64 },

    #[error("fixed-point iteration did not converge in {iterations} iterations (last residual {last_residual:.3e})")]
    NoConvergence {
        iterations: usize,
        last_residual: f64,
        history: Vec<f64>,
    },
}

impl Error {
    /// Short machine-readable identifier, used in log lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::SingularVolatility { .. } => "SingularVolatility",
            Error::DegenerateLambda { .. } => "DegenerateLambda",
            Error::PicardDivergence { .. } => "PicardDivergence",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::DomainTooSmall(_) => "DomainTooSmall",
            Error::NonMonotone { .. } => "NonMonotone",
            Error::OutOfRange { .. } => "OutOfRange",
            Error::PathOutOfRange { .. } => "PathOutOfRange",
            Error::MassLoss { .. } => "MassLoss",
            Error::NegativeDensity { .. } => "NegativeDensity",
            Error::NoConvergence { .. } => "NoConvergence",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
