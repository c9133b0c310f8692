//! Trajectory planning that keeps a robot team connected while it moves
//! under motion and sensing uncertainty.
//!
//! The pipeline, bottom to top:
//!
//! - [`spectral`]: proximity-graph edge weights, Laplacians, and a
//!   deterministic symmetric eigensolver; algebraic connectivity is the
//!   second-smallest Laplacian eigenvalue.
//! - [`belief`]: extended Kalman filtering and the belief dynamics that
//!   propagate (mean, covariance) pairs through a stochastic model.
//! - [`metric`]: a probabilistic lower bound on connectivity computed from
//!   beliefs instead of true states, its barrier cost, analytic gradient,
//!   and a rank-one Hessian approximation cheap enough to plan with.
//! - [`ilqg`]: iterative linear-quadratic smoothing over belief trajectories
//!   for a subset of robots, with the consensus penalty terms folded in.
//! - [`admm`]: the distributed consensus loop that stitches per-robot subset
//!   solutions into one feasible team plan.
//! - [`sim`]: double-integrator models, LQR initial guesses and tracking,
//!   Monte Carlo rollout validation, and multi-segment online missions.

pub mod admm;
pub mod belief;
pub mod error;
pub mod ilqg;
pub mod metric;
pub mod sim;
pub mod spectral;

pub use admm::{AdmmParams, ConsensusOutcome, PlannerIteration, StopRule};
pub use belief::{Belief, BeliefVector, LinearSystemModel, SystemModel};
pub use error::{Error, Result};
pub use ilqg::{
    AugmentedCostTerms, IlqgOutcome, NominalPlan, QuadraticCostSlice, RobotObjective, TeamProblem,
};
pub use metric::{ConnectivityConfig, MetricEngine, MetricEvaluation};
pub use sim::{
    MissionRun, MissionSpec, RobotRole, RobotSpec, RolloutRecord, RolloutResult,
    ValidationSummary,
};
pub use spectral::LaplacianSpectrum;
