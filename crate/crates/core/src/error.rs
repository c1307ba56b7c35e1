use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {left} steps vs {right} steps")]
    GridMismatch { left: usize, right: usize },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("problem description: {0}")]
    Parse(String),

    #[error("unknown {what} kind `{kind}` (expected one of: {expected})")]
    UnknownKind {
        what: &'static str,
        kind: String,
        expected: &'static str,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("gradient spot-check failed for {what} at t = {t}, x = {x:?}: relative error {error:e}")]
    GradientCheck {
        what: &'static str,
        t: f64,
        x: Vec<f64>,
        error: f64,
    },

    #[error("non-finite {what} at node {node}")]
    NonFinite { what: &'static str, node: usize },

    #[error("state blow-up at step {step}: |x| = {norm:e}")]
    BlowUp { step: usize, norm: f64 },

    #[error(
        "fixed-point iteration did not converge in {iterations} iterations \
         (last residual {residual:e}); check the declared Lipschitz constant"
    )]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("Carathéodory reduction failed at row {row}: {reason}")]
    RankFailure { row: usize, reason: String },

    #[error("problem is not linear in the state with convex costs: {0}")]
    NotLinearConvex(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Solver blow-ups are reported separately from validation failures by
    /// front ends.
    pub fn is_blow_up(&self) -> bool {
        matches!(self, Error::BlowUp { .. } | Error::NonFinite { .. })
    }
}
