use alloc::string::String;

/// Failures surfaced by the solver.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("mass matrix is numerically singular (condition number {condition:.3e})")]
    SingularMass { condition: f64 },

    #[error("time {t} lies outside the horizon [0, {horizon}]")]
    OutOfHorizon { t: f64, horizon: f64 },

    #[error("state diverged at t = {t}: |x[{component}]| = {magnitude:.3e}")]
    Divergence { t: f64, component: usize, magnitude: f64 },

    #[error("Riccati solution blew up at t = {t} (norm {norm:.3e})")]
    RiccatiBlowUp { t: f64, norm: f64 },

    #[error("target at distance {distance} is outside the reachable radius {reach}")]
    UnreachableTarget { distance: f64, reach: f64 },

    #[error("smoothed-delta support leaves the box along dimension {dim}")]
    SupportOverflow { dim: usize },

    #[error("all feedback probes vanish (K is identically zero)")]
    DegenerateGain,

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
