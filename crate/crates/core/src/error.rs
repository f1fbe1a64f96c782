use crate::expr::{EvalError, ParseError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("explicit time dependence through `{0}`; only autonomous Lagrangians are supported")]
    NotAutonomous(String),
    #[error("parameter `{0}` has no value")]
    UnboundParameter(String),
    #[error("momentum symbol `{0}` appears in a Lagrangian")]
    MomentumInLagrangian(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("point off first-order surface: |gamma| = {residual:e}")]
    OffSurface { residual: f64 },
    #[error("not almost regular at point: |Fbar| = {fbar_norm:e}")]
    NotAlmostRegular { fbar_norm: f64 },
    #[error("surface not found from seed: residual {residual:e} after {iterations} iterations")]
    SurfaceNotFound { residual: f64, iterations: usize },
    #[error("non-constant rank of {what}: observed {min}..={max} across points")]
    NonConstantRank { what: String, min: usize, max: usize },
    #[error("preimage flow left the fiber: momentum drift {drift:e}")]
    PreimageDrift { drift: f64 },
    #[error("not projectable: spread {spread:e} over the preimage fiber")]
    NotProjectable { spread: f64 },
    #[error("integration diverged at t = {t}")]
    Divergence { t: f64 },
    #[error("inverse Legendre map did not converge: residual {residual:e}")]
    LegendreInverse { residual: f64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
