//! Error taxonomy shared across the workspace.
//!
//! The variants separate "you called this wrong" (`Domain`, `Config`) from
//! "the math gave up" (`Numerical`), and both from the planner-level
//! conditions a caller is expected to branch on: barrier violations,
//! undefined gradients, broken consensus exchanges, and infeasible missions.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// An argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Mission or solver configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A numerical routine failed to converge or hit a conditioning limit.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The connectivity lower bound reached the barrier floor. The barrier
    /// cost and its derivatives are undefined at or below the floor, so this
    /// is kept distinct from a generic numerical failure.
    #[error("connectivity barrier violated: lower bound {lambda2_lb} <= floor {epsilon}")]
    BarrierViolation { lambda2_lb: f64, epsilon: f64 },

    /// A derivative was requested where the quantity is not differentiable,
    /// e.g. a repeated connectivity eigenvalue.
    #[error("gradient undefined: {0}")]
    GradientUndefined(String),

    /// Two robots' mean positions coincide on an edge whose weight is still
    /// changing with distance, so the distance direction is singular.
    #[error("singularity: {0}")]
    Singularity(String),

    /// A consensus exchange broke the coverage rules of the subset scheduler.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// No feasible plan exists under the given mission and budget.
    #[error("infeasible: {0}")]
    Infeasible(String),
}
