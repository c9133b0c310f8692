//! Experiment layer: planar double-integrator robots, LQR initial guesses
//! and tracking controllers, multi-segment missions, and Monte Carlo
//! validation of the connectivity guarantee.
//!
//! A mission names the robots (task-bearing ones with destinations, relays
//! without), one or more segments of destinations, and the planner
//! parameters. Running it plans each segment from the previous segment's
//! terminal beliefs and chains the results into one nominal plan. Rollouts
//! then simulate the closed loop: sampled initial states, process and
//! measurement noise, Kalman filtering, and LQR tracking of the nominal,
//! while recording the true algebraic connectivity of the
//! disk-communication graph at every step. The validation summary compares
//! the empirical violation rates against the configured confidence level.

use nalgebra::{dmatrix, DMatrix, DVector, Vector2};
use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::Normal;

use crate::admm::{self, AdmmParams, ConsensusOutcome, StopRule};
use crate::belief::{ekf_correct, ekf_predict, Belief, LinearSystemModel, SystemModel};
use crate::error::{Error, Result};
use crate::ilqg::{clamp_input_norm, NominalPlan, RobotObjective, TeamProblem};
use crate::metric::ConnectivityConfig;
use crate::metric::MetricEngine;
use crate::spectral::{algebraic_connectivity, binary_edge_weight, symmetric_eigendecomposition};

/// Intensity scaling the discretized process noise, m^2 s^-3.
pub const PROCESS_NOISE_INTENSITY: f64 = 0.1;
/// Variance of each position measurement coordinate, m^2.
pub const MEASUREMENT_VARIANCE: f64 = 1.0;
/// Acceleration magnitude cap, m/s^2.
pub const INPUT_LIMIT: f64 = 5.0;
/// Target halvings tried before declaring the initial guess infeasible.
const GUESS_HALVINGS: u32 = 20;
/// Iteration cap for the tracking-gain Riccati fixed point.
const RICCATI_ITERATION_CAP: usize = 10_000;

/// Planar double integrator over position and velocity, driven by
/// acceleration, measuring position. The process noise is the standard
/// white-acceleration discretization scaled by `process_intensity`.
pub fn double_integrator_model(
    dt: f64,
    process_intensity: f64,
    measurement_variance: f64,
) -> Result<LinearSystemModel> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    if !(process_intensity >= 0.0) || !(measurement_variance >= 0.0) {
        return Err(Error::Config(
            "noise magnitudes must be non-negative".into(),
        ));
    }
    let transition = dmatrix![
        1.0, 0.0, dt, 0.0;
        0.0, 1.0, 0.0, dt;
        0.0, 0.0, 1.0, 0.0;
        0.0, 0.0, 0.0, 1.0
    ];
    let input = dmatrix![
        dt * dt / 2.0, 0.0;
        0.0, dt * dt / 2.0;
        dt, 0.0;
        0.0, dt
    ];
    let process_noise = dmatrix![
        dt.powi(3) / 3.0, 0.0, dt * dt / 2.0, 0.0;
        0.0, dt.powi(3) / 3.0, 0.0, dt * dt / 2.0;
        dt * dt / 2.0, 0.0, dt, 0.0;
        0.0, dt * dt / 2.0, 0.0, dt
    ] * process_intensity;
    let sensing = dmatrix![
        1.0, 0.0, 0.0, 0.0;
        0.0, 1.0, 0.0, 0.0
    ];
    let measurement_noise = DMatrix::identity(2, 2) * measurement_variance;
    LinearSystemModel::new(
        transition,
        input,
        sensing,
        process_noise,
        measurement_noise,
        vec![0, 1],
    )
}

/// Terminal state weight for a robot with a destination: position error
/// counts, residual velocity counts much more.
pub fn primary_state_weight() -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 100.0, 100.0]))
}

/// Terminal state weight for a relay: position is free, only residual
/// velocity is penalized.
pub fn bridge_state_weight() -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 100.0, 100.0]))
}

/// Per-step input effort weight shared by both roles.
pub fn default_input_weight() -> DMatrix<f64> {
    DMatrix::identity(2, 2) * 0.01
}

/// State weight for the rollout tracking regulator. Position and velocity
/// deviations from the plan are weighted equally; the task weights are not
/// reused here because the relay weight leaves position unregulated and the
/// task-bearing weight regulates position so softly that tracking errors
/// would dwarf the estimation uncertainty the connectivity margins cover.
pub fn tracking_state_weight() -> DMatrix<f64> {
    DMatrix::identity(4, 4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobotRole {
    /// Task-bearing: has a destination in every segment.
    Primary,
    /// Relay: repositions only to keep the team connected.
    Bridge,
}

#[derive(Debug, Clone)]
pub struct RobotSpec {
    pub role: RobotRole,
    pub initial_position: Vector2<f64>,
}

/// A full mission description: who flies, where the task-bearing robots
/// must go in each segment, and every planner parameter.
#[derive(Debug, Clone)]
pub struct MissionSpec {
    pub robots: Vec<RobotSpec>,
    /// Per segment, one entry per robot: destination for task-bearing
    /// robots, `None` for relays.
    pub segments: Vec<Vec<Option<Vector2<f64>>>>,
    /// Steps per segment.
    pub horizon: usize,
    /// Seconds per step.
    pub dt: f64,
    pub process_intensity: f64,
    pub measurement_variance: f64,
    pub input_limit: f64,
    /// Initial state covariance shared by every robot.
    pub initial_covariance: DMatrix<f64>,
    pub connectivity: ConnectivityConfig,
    pub admm: AdmmParams,
    pub stop: StopRule,
}

impl MissionSpec {
    pub fn n_robots(&self) -> usize {
        self.robots.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.robots.len();
        if n < 2 {
            return Err(Error::Config("a mission needs at least two robots".into()));
        }
        if self.connectivity.n_robots != n {
            return Err(Error::Config(format!(
                "connectivity is configured for {} robots, mission has {n}",
                self.connectivity.n_robots
            )));
        }
        self.connectivity.validate()?;
        if self.horizon == 0 {
            return Err(Error::Config("segment horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!(
                "time step must be positive, got {}",
                self.dt
            )));
        }
        if !(self.input_limit > 0.0) {
            return Err(Error::Config("input limit must be positive".into()));
        }
        if !(self.process_intensity >= 0.0) {
            return Err(Error::Config("process intensity must be non-negative".into()));
        }
        if !(self.measurement_variance > 0.0) {
            return Err(Error::Config(
                "the filter needs positive measurement noise".into(),
            ));
        }
        if self.segments.is_empty() {
            return Err(Error::Config("a mission needs at least one segment".into()));
        }
        for (s, segment) in self.segments.iter().enumerate() {
            if segment.len() != n {
                return Err(Error::Config(format!(
                    "segment {s} names {} destinations for {n} robots",
                    segment.len()
                )));
            }
            for (i, (spec, target)) in self.robots.iter().zip(segment).enumerate() {
                match (spec.role, target) {
                    (RobotRole::Primary, None) => {
                        return Err(Error::Config(format!(
                            "robot {i} is task-bearing but segment {s} gives it no destination"
                        )))
                    }
                    (RobotRole::Bridge, Some(_)) => {
                        return Err(Error::Config(format!(
                            "robot {i} is a relay but segment {s} assigns it a destination"
                        )))
                    }
                    _ => {}
                }
            }
        }
        if self.initial_covariance.nrows() != 4 || self.initial_covariance.ncols() != 4 {
            return Err(Error::Config(
                "initial covariance must be 4x4 for the planar double integrator".into(),
            ));
        }
        if (&self.initial_covariance - self.initial_covariance.transpose()).amax() > 1e-12 {
            return Err(Error::Config("initial covariance must be symmetric".into()));
        }
        self.admm.validate(n)?;
        self.stop.validate()?;
        Ok(())
    }

    /// Starting beliefs: at the named positions with zero velocity and the
    /// shared initial covariance.
    pub fn initial_beliefs(&self) -> Result<Vec<Belief>> {
        self.robots
            .iter()
            .map(|spec| {
                let p = spec.initial_position;
                Belief::new(
                    DVector::from_vec(vec![p.x, p.y, 0.0, 0.0]),
                    self.initial_covariance.clone(),
                )
            })
            .collect()
    }

    /// Desired terminal state for one robot in one segment: the destination
    /// (relays keep their initial position, which their weight ignores)
    /// with zero desired velocity.
    fn desired_state(&self, robot: usize, segment: usize) -> DVector<f64> {
        let p = self.segments[segment][robot].unwrap_or(self.robots[robot].initial_position);
        DVector::from_vec(vec![p.x, p.y, 0.0, 0.0])
    }

    /// Three task-bearing robots spread apart while two relays fill the
    /// middle; one segment at the short horizon used by fast test runs.
    pub fn offline_desk() -> Self {
        Self::desk_mission(
            vec![vec![
                Some(Vector2::new(-22.0, 14.0)),
                Some(Vector2::new(0.0, 26.0)),
                Some(Vector2::new(22.0, 14.0)),
                None,
                None,
            ]],
            100,
            StopRule::converged(60),
        )
    }

    /// Two segments under a 25-second planning budget each: spread out,
    /// then regroup inward.
    pub fn online_desk() -> Self {
        Self::desk_mission(
            vec![
                vec![
                    Some(Vector2::new(-22.0, 14.0)),
                    Some(Vector2::new(0.0, 26.0)),
                    Some(Vector2::new(22.0, 14.0)),
                    None,
                    None,
                ],
                vec![
                    Some(Vector2::new(-16.0, 8.0)),
                    Some(Vector2::new(0.0, 18.0)),
                    Some(Vector2::new(16.0, 8.0)),
                    None,
                    None,
                ],
            ],
            100,
            StopRule::timed(25.0),
        )
    }

    /// The offline layout at the full 250-step horizon.
    pub fn offline_full() -> Self {
        let mut mission = Self::offline_desk();
        mission.horizon = 250;
        mission.stop = StopRule::converged(100);
        mission
    }

    /// Ten robots (six task-bearing, four relays) walking a hexagon
    /// formation through six segments at the full horizon, each segment
    /// planned under a 25-second budget.
    pub fn online_full() -> Self {
        let hexagon = |center: Vector2<f64>, radius: f64| -> Vec<Option<Vector2<f64>>> {
            let mut targets: Vec<Option<Vector2<f64>>> = (0..6)
                .map(|m| {
                    let angle = std::f64::consts::PI / 3.0 * m as f64;
                    Some(center + Vector2::new(radius * angle.cos(), radius * angle.sin()))
                })
                .collect();
            targets.extend([None, None, None, None]);
            targets
        };
        let centers = [
            Vector2::new(10.0, 0.0),
            Vector2::new(10.0, 10.0),
            Vector2::new(0.0, 16.0),
            Vector2::new(-10.0, 10.0),
            Vector2::new(-10.0, 0.0),
            Vector2::new(0.0, 0.0),
        ];
        let segments = centers.iter().map(|&c| hexagon(c, 16.0)).collect();
        let mut robots: Vec<RobotSpec> = hexagon(Vector2::new(0.0, 0.0), 9.0)
            .into_iter()
            .flatten()
            .map(|p| RobotSpec {
                role: RobotRole::Primary,
                initial_position: p,
            })
            .collect();
        for p in [
            Vector2::new(4.0, 0.0),
            Vector2::new(-4.0, 0.0),
            Vector2::new(0.0, 4.0),
            Vector2::new(0.0, -4.0),
        ] {
            robots.push(RobotSpec {
                role: RobotRole::Bridge,
                initial_position: p,
            });
        }
        let n = robots.len();
        MissionSpec {
            robots,
            segments,
            horizon: 250,
            dt: 0.2,
            process_intensity: PROCESS_NOISE_INTENSITY,
            measurement_variance: MEASUREMENT_VARIANCE,
            input_limit: INPUT_LIMIT,
            initial_covariance: default_initial_covariance(),
            connectivity: default_connectivity(n),
            admm: AdmmParams::default(),
            stop: StopRule::timed(25.0),
        }
    }

    fn desk_mission(
        segments: Vec<Vec<Option<Vector2<f64>>>>,
        horizon: usize,
        stop: StopRule,
    ) -> Self {
        let robots = vec![
            RobotSpec {
                role: RobotRole::Primary,
                initial_position: Vector2::new(-12.0, 0.0),
            },
            RobotSpec {
                role: RobotRole::Primary,
                initial_position: Vector2::new(0.0, 6.0),
            },
            RobotSpec {
                role: RobotRole::Primary,
                initial_position: Vector2::new(12.0, 0.0),
            },
            RobotSpec {
                role: RobotRole::Bridge,
                initial_position: Vector2::new(-6.0, -4.0),
            },
            RobotSpec {
                role: RobotRole::Bridge,
                initial_position: Vector2::new(6.0, -4.0),
            },
        ];
        let n = robots.len();
        MissionSpec {
            robots,
            segments,
            horizon,
            dt: 0.2,
            process_intensity: PROCESS_NOISE_INTENSITY,
            measurement_variance: MEASUREMENT_VARIANCE,
            input_limit: INPUT_LIMIT,
            initial_covariance: default_initial_covariance(),
            connectivity: default_connectivity(n),
            admm: AdmmParams::default(),
            stop,
        }
    }
}

/// The documented initial state covariance: loose on position, tight on
/// velocity.
pub fn default_initial_covariance() -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.1, 0.001, 0.001]))
}

/// The documented connectivity parameters for an `n`-robot team.
pub fn default_connectivity(n: usize) -> ConnectivityConfig {
    ConnectivityConfig {
        delta: 40.0,
        delta0: 35.0,
        epsilon: 0.1,
        confidence: 0.997,
        barrier_gain: 0.001,
        n_robots: n,
        position_dim: 2,
    }
}

/// Builds the optimization problem for one mission segment: shared
/// dynamics, role weights against that segment's destinations, and the
/// connectivity engine.
pub fn team_problem(mission: &MissionSpec, segment: usize) -> Result<TeamProblem> {
    mission.validate()?;
    if segment >= mission.segments.len() {
        return Err(Error::Config(format!(
            "segment {segment} out of range for {} segments",
            mission.segments.len()
        )));
    }
    let model = double_integrator_model(
        mission.dt,
        mission.process_intensity,
        mission.measurement_variance,
    )?;
    let models: Vec<Box<dyn SystemModel>> = (0..mission.n_robots())
        .map(|_| Box::new(model.clone()) as Box<dyn SystemModel>)
        .collect();
    let objectives = mission
        .robots
        .iter()
        .enumerate()
        .map(|(i, spec)| RobotObjective {
            x_desired: mission.desired_state(i, segment),
            w_terminal: match spec.role {
                RobotRole::Primary => primary_state_weight(),
                RobotRole::Bridge => bridge_state_weight(),
            },
            w_input: default_input_weight(),
        })
        .collect();
    Ok(TeamProblem {
        models,
        objectives,
        engine: MetricEngine::new(mission.connectivity.clone(), vec![0, 1])?,
        input_limit: mission.input_limit,
    })
}

/// Solves `m x = rhs` for a small symmetric positive definite `m`.
fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|chol| chol.solve(rhs))
        .ok_or_else(|| Error::Numerical("input-cost block is not positive definite".into()))
}

/// Finite-horizon LQR inputs steering `x0` toward `x_des` under terminal
/// weight `w_terminal` and running input weight `w_input`, clamped to the
/// magnitude limit. The error dynamics are exact because the desired state
/// is an equilibrium of the transition matrix.
fn finite_horizon_lqr_inputs(
    model: &LinearSystemModel,
    w_terminal: &DMatrix<f64>,
    w_input: &DMatrix<f64>,
    x0: &DVector<f64>,
    x_des: &DVector<f64>,
    horizon: usize,
    limit: f64,
) -> Result<DMatrix<f64>> {
    let a = &model.transition;
    let b = &model.input;
    let mut s = w_terminal.clone();
    let mut gains: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let quu = w_input + b.transpose() * &s * b;
        let k = solve_spd(&quu, &(b.transpose() * &s * a))?;
        s = a.transpose() * &s * (a - b * &k);
        s = (&s + s.transpose()) * 0.5;
        gains.push(k);
    }
    gains.reverse();
    let mut x = x0.clone();
    let mut inputs = DMatrix::zeros(horizon, model.input_dim());
    for (t, k) in gains.iter().enumerate() {
        let u = clamp_input_norm(&(-(k * (&x - x_des))), limit);
        inputs.row_mut(t).copy_from(&u.transpose());
        x = a * x + b * &u;
    }
    Ok(inputs)
}

/// Initial trajectory guess for one segment: task-bearing robots steer
/// toward their destinations with a finite-horizon LQR, relays hover. If
/// the induced plan breaks the connectivity bound, the guess destinations
/// (not the planner's) are pulled halfway toward the start repeatedly.
pub fn lqr_initial_guess(
    problem: &TeamProblem,
    mission: &MissionSpec,
    segment: usize,
    initial: &[Belief],
) -> Result<NominalPlan> {
    let model = double_integrator_model(
        mission.dt,
        mission.process_intensity,
        mission.measurement_variance,
    )?;
    let horizon = mission.horizon;
    let epsilon = mission.connectivity.epsilon;
    let w_input = default_input_weight();
    for halving in 0..=GUESS_HALVINGS {
        let shrink = 0.5_f64.powi(halving as i32);
        let mut inputs = Vec::with_capacity(mission.n_robots());
        for (i, spec) in mission.robots.iter().enumerate() {
            let rows = match spec.role {
                RobotRole::Primary => {
                    let x0 = &initial[i].mean;
                    let full = mission.desired_state(i, segment);
                    let target = x0 + (full - x0) * shrink;
                    finite_horizon_lqr_inputs(
                        &model,
                        &primary_state_weight(),
                        &w_input,
                        x0,
                        &target,
                        horizon,
                        mission.input_limit,
                    )?
                }
                RobotRole::Bridge => DMatrix::zeros(horizon, model.input_dim()),
            };
            inputs.push(rows);
        }
        let plan = NominalPlan::from_inputs(problem, initial, inputs)?;
        let mut feasible = true;
        for t in 0..=horizon {
            if problem.engine.evaluate(&plan.beliefs_at(t))?.lambda2_lb <= epsilon {
                feasible = false;
                break;
            }
        }
        if feasible {
            return Ok(plan);
        }
    }
    Err(Error::Infeasible(format!(
        "no feasible initial guess for segment {segment} after {GUESS_HALVINGS} target halvings"
    )))
}

/// Time-invariant LQR tracking law.
///
/// The gain comes from the infinite-horizon Riccati fixed point; every
/// robot tracks with the same regulator built from
/// [`tracking_state_weight`] regardless of role.
#[derive(Debug, Clone)]
pub struct LqrTracker {
    pub gain: DMatrix<f64>,
}

pub fn lqr_tracker(
    model: &LinearSystemModel,
    w_state: &DMatrix<f64>,
    w_input: &DMatrix<f64>,
) -> Result<LqrTracker> {
    let a = &model.transition;
    let b = &model.input;
    let mut s = w_state.clone();
    let mut converged = false;
    for _ in 0..RICCATI_ITERATION_CAP {
        let quu = w_input + b.transpose() * &s * b;
        let k = solve_spd(&quu, &(b.transpose() * &s * a))?;
        let mut next = a.transpose() * &s * (a - b * &k) + w_state;
        next = (&next + next.transpose()) * 0.5;
        let step = (&next - &s).amax();
        s = next;
        if step < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "tracking Riccati iteration did not settle in {RICCATI_ITERATION_CAP} steps"
        )));
    }
    let quu = w_input + b.transpose() * &s * b;
    let k = solve_spd(&quu, &(b.transpose() * &s * a))?;
    let residual = (a.transpose() * &s * (a - b * &k) + w_state - &s).amax();
    if residual > 1e-9 {
        return Err(Error::Numerical(format!(
            "Riccati fixed point residual {residual:.3e} exceeds 1e-9"
        )));
    }
    let closed = a - b * &k;
    let radius = closed
        .complex_eigenvalues()
        .iter()
        .map(|e| e.norm())
        .fold(0.0, f64::max);
    if radius >= 1.0 {
        return Err(Error::Numerical(format!(
            "closed-loop spectral radius {radius} is not stable"
        )));
    }
    Ok(LqrTracker { gain: k })
}

/// Square root factor of a symmetric PSD matrix for sampling: `L L' = m`.
/// Returns `None` for an exactly zero matrix (no noise to draw).
fn sampling_factor(m: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    if m.amax() == 0.0 {
        return Ok(None);
    }
    let spectrum = symmetric_eigendecomposition(m)?;
    let mut scaled = spectrum.eigenvectors.clone();
    for (c, &value) in spectrum.eigenvalues.iter().enumerate() {
        if value < -1e-9 {
            return Err(Error::Numerical(format!(
                "covariance has negative eigenvalue {value:.3e}"
            )));
        }
        let root = value.max(0.0).sqrt();
        scaled.column_mut(c).scale_mut(root);
    }
    Ok(Some(scaled))
}

/// Everything a rollout needs besides its seed, built once and shared.
pub struct RolloutContext<'a> {
    pub mission: &'a MissionSpec,
    pub plan: &'a NominalPlan,
    /// The plan's connectivity lower bound at each timestep.
    pub metric_trace: &'a [f64],
    model: LinearSystemModel,
    tracker: LqrTracker,
    init_factor: Option<DMatrix<f64>>,
    process_factor: Option<DMatrix<f64>>,
    measurement_sigma: f64,
}

impl<'a> RolloutContext<'a> {
    pub fn new(
        mission: &'a MissionSpec,
        plan: &'a NominalPlan,
        metric_trace: &'a [f64],
    ) -> Result<Self> {
        mission.validate()?;
        if plan.n_robots() != mission.n_robots() {
            return Err(Error::Config(format!(
                "plan covers {} robots, mission has {}",
                plan.n_robots(),
                mission.n_robots()
            )));
        }
        if metric_trace.len() != plan.horizon() + 1 {
            return Err(Error::Config(format!(
                "{} metric entries for horizon {}",
                metric_trace.len(),
                plan.horizon()
            )));
        }
        let model = double_integrator_model(
            mission.dt,
            mission.process_intensity,
            mission.measurement_variance,
        )?;
        let tracker = lqr_tracker(&model, &tracking_state_weight(), &default_input_weight())?;
        let init_factor = sampling_factor(&mission.initial_covariance)?;
        let process_factor = sampling_factor(&model.process_noise)?;
        Ok(Self {
            mission,
            plan,
            metric_trace,
            model,
            tracker,
            init_factor,
            process_factor,
            measurement_sigma: mission.measurement_variance.sqrt(),
        })
    }
}

/// One stochastic closed-loop simulation of a planned mission.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// Per robot: horizon + 1 true states.
    pub true_states: Vec<Vec<DVector<f64>>>,
    /// Per robot: horizon + 1 filtered beliefs.
    pub beliefs: Vec<Vec<Belief>>,
    /// Algebraic connectivity of the true positions under the binary
    /// disk-communication graph, one value per timestep.
    pub lambda2: Vec<f64>,
    pub violated_epsilon: bool,
    pub violated_metric: bool,
}

impl RolloutResult {
    pub fn min_lambda2(&self) -> f64 {
        self.lambda2.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn true_graph_lambda2(states: &[DVector<f64>], delta: f64) -> Result<f64> {
    let n = states.len();
    let mut weights = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = ((states[i][0] - states[j][0]).powi(2)
                + (states[i][1] - states[j][1]).powi(2))
            .sqrt();
            let w = binary_edge_weight(d, delta)?;
            weights[(i, j)] = w;
            weights[(j, i)] = w;
        }
    }
    Ok(algebraic_connectivity(&weights)?.lambda2())
}

/// Simulates the closed loop once: the true initial state is drawn from
/// the initial belief, then each step applies the LQR tracking input
/// computed from the filtered estimate (clamped), propagates the true
/// dynamics with sampled process noise, measures with sampled noise, and
/// filters. Draw order is fixed (per robot: four initial-state normals;
/// then per step and robot: four process, two measurement), so one seed
/// always produces one result.
pub fn rollout(ctx: &RolloutContext, seed: u64) -> Result<RolloutResult> {
    let mission = ctx.mission;
    let plan = ctx.plan;
    let n = mission.n_robots();
    let horizon = plan.horizon();
    let epsilon = mission.connectivity.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |count: usize, rng: &mut ChaCha8Rng| -> DVector<f64> {
        DVector::from_iterator(count, (0..count).map(|_| standard.sample(rng)))
    };

    let mut true_states: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n);
    let mut beliefs: Vec<Vec<Belief>> = Vec::with_capacity(n);
    for i in 0..n {
        let z = draw(4, &mut rng);
        let x0 = match &ctx.init_factor {
            Some(l) => &plan.beliefs[i][0].mean + l * z,
            None => plan.beliefs[i][0].mean.clone(),
        };
        true_states.push(vec![x0]);
        beliefs.push(vec![plan.beliefs[i][0].clone()]);
    }

    let mut lambda2 = Vec::with_capacity(horizon + 1);
    let current: Vec<DVector<f64>> = true_states.iter().map(|s| s[0].clone()).collect();
    lambda2.push(true_graph_lambda2(&current, mission.connectivity.delta)?);

    for t in 0..horizon {
        for i in 0..n {
            let nominal_u = plan.inputs[i].row(t).transpose();
            let deviation = &beliefs[i][t].mean - &plan.beliefs[i][t].mean;
            let u = clamp_input_norm(
                &(nominal_u - &ctx.tracker.gain * deviation),
                mission.input_limit,
            );
            let w = match &ctx.process_factor {
                Some(l) => l * draw(4, &mut rng),
                None => {
                    draw(4, &mut rng);
                    DVector::zeros(4)
                }
            };
            let x_next = ctx.model.motion(&true_states[i][t], &u, &w);
            let nu = draw(2, &mut rng) * ctx.measurement_sigma;
            let z = ctx.model.sensing(&x_next, &nu);
            let predicted = ekf_predict(&ctx.model, &beliefs[i][t], &u)?;
            let corrected = ekf_correct(&ctx.model, &predicted, &z)?;
            true_states[i].push(x_next);
            beliefs[i].push(corrected);
        }
        let current: Vec<DVector<f64>> = true_states.iter().map(|s| s[t + 1].clone()).collect();
        lambda2.push(true_graph_lambda2(&current, mission.connectivity.delta)?);
    }

    let violated_epsilon = lambda2.iter().any(|&v| v < epsilon);
    let violated_metric = lambda2
        .iter()
        .zip(ctx.metric_trace)
        .any(|(&v, &bound)| v < bound);
    Ok(RolloutResult {
        true_states,
        beliefs,
        lambda2,
        violated_epsilon,
        violated_metric,
    })
}

/// Compact per-rollout record kept by batch validation runs.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub index: u64,
    pub min_lambda2: f64,
    pub violated_epsilon: bool,
    pub violated_metric: bool,
}

/// Aggregate violation statistics against the configured confidence level.
#[derive(Debug, Clone)]
pub struct ValidationSummary {
    pub rollouts: usize,
    /// Rollouts with any timestep below the connectivity floor.
    pub rollouts_below_epsilon: usize,
    /// Rollouts with any timestep below the plan's lower bound.
    pub rollouts_below_metric: usize,
    pub per_timestep_below_epsilon: Vec<usize>,
    pub per_timestep_below_metric: Vec<usize>,
    /// Smallest per-timestep empirical success rate against the floor.
    pub worst_timestep_success: f64,
    /// Binomial standard deviation of the success estimate at the
    /// configured confidence.
    pub binomial_sigma: f64,
    /// Success rate every timestep must reach: confidence minus three
    /// sigma.
    pub required_success: f64,
    pub pass: bool,
}

fn summarize(
    rollouts: usize,
    rollouts_below_epsilon: usize,
    rollouts_below_metric: usize,
    per_timestep_below_epsilon: Vec<usize>,
    per_timestep_below_metric: Vec<usize>,
    confidence: f64,
) -> ValidationSummary {
    let binomial_sigma = if rollouts > 0 {
        (confidence * (1.0 - confidence) / rollouts as f64).sqrt()
    } else {
        0.0
    };
    let required_success = confidence - 3.0 * binomial_sigma;
    let worst_timestep_success = if rollouts > 0 {
        per_timestep_below_epsilon
            .iter()
            .map(|&c| 1.0 - c as f64 / rollouts as f64)
            .fold(1.0, f64::min)
    } else {
        1.0
    };
    ValidationSummary {
        rollouts,
        rollouts_below_epsilon,
        rollouts_below_metric,
        per_timestep_below_epsilon,
        per_timestep_below_metric,
        worst_timestep_success,
        binomial_sigma,
        required_success,
        pass: worst_timestep_success >= required_success,
    }
}

/// Aggregates finished rollouts into the validation summary.
pub fn validate_connectivity(
    results: &[RolloutResult],
    metric_trace: &[f64],
    cfg: &ConnectivityConfig,
) -> Result<ValidationSummary> {
    if results.is_empty() {
        return Err(Error::Config("validation needs at least one rollout".into()));
    }
    let steps = metric_trace.len();
    let mut per_eps = vec![0usize; steps];
    let mut per_metric = vec![0usize; steps];
    let mut below_eps = 0usize;
    let mut below_metric = 0usize;
    for result in results {
        if result.lambda2.len() != steps {
            return Err(Error::Config(format!(
                "rollout has {} timesteps, metric trace has {steps}",
                result.lambda2.len()
            )));
        }
        if result.violated_epsilon {
            below_eps += 1;
        }
        if result.violated_metric {
            below_metric += 1;
        }
        for (t, (&v, &bound)) in result.lambda2.iter().zip(metric_trace).enumerate() {
            if v < cfg.epsilon {
                per_eps[t] += 1;
            }
            if v < bound {
                per_metric[t] += 1;
            }
        }
    }
    Ok(summarize(
        results.len(),
        below_eps,
        below_metric,
        per_eps,
        per_metric,
        cfg.confidence,
    ))
}

/// Runs `count` independent rollouts in parallel (each seeded as the root
/// seed XOR its index) and reduces them to per-rollout records plus the
/// validation summary, without retaining the trajectories.
pub fn run_rollouts(
    ctx: &RolloutContext,
    count: usize,
    root_seed: u64,
) -> Result<(Vec<RolloutRecord>, ValidationSummary)> {
    let steps = ctx.metric_trace.len();
    let epsilon = ctx.mission.connectivity.epsilon;
    let per_rollout: Vec<(RolloutRecord, Vec<bool>, Vec<bool>)> = (0..count as u64)
        .into_par_iter()
        .map(|index| -> Result<(RolloutRecord, Vec<bool>, Vec<bool>)> {
            let result = rollout(ctx, root_seed ^ index)?;
            let record = RolloutRecord {
                index,
                min_lambda2: result.min_lambda2(),
                violated_epsilon: result.violated_epsilon,
                violated_metric: result.violated_metric,
            };
            let below_eps = result.lambda2.iter().map(|&v| v < epsilon).collect();
            let below_metric = result
                .lambda2
                .iter()
                .zip(ctx.metric_trace)
                .map(|(&v, &bound)| v < bound)
                .collect();
            Ok((record, below_eps, below_metric))
        })
        .collect::<Result<_>>()?;

    let mut per_eps = vec![0usize; steps];
    let mut per_metric = vec![0usize; steps];
    let mut below_eps = 0usize;
    let mut below_metric = 0usize;
    let mut records = Vec::with_capacity(per_rollout.len());
    for (record, eps_flags, metric_flags) in per_rollout {
        below_eps += record.violated_epsilon as usize;
        below_metric += record.violated_metric as usize;
        for (t, flag) in eps_flags.into_iter().enumerate() {
            per_eps[t] += flag as usize;
        }
        for (t, flag) in metric_flags.into_iter().enumerate() {
            per_metric[t] += flag as usize;
        }
        records.push(record);
    }
    let summary = summarize(
        count,
        below_eps,
        below_metric,
        per_eps,
        per_metric,
        ctx.mission.connectivity.confidence,
    );
    Ok((records, summary))
}

/// Planning output for one mission segment.
#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub outcome: ConsensusOutcome,
    /// Beliefs the segment was planned from.
    pub initial_beliefs: Vec<Belief>,
}

/// A fully planned mission: per-segment outcomes, the segments chained
/// into one nominal plan, and that plan's connectivity bound per timestep.
#[derive(Debug, Clone)]
pub struct MissionRun {
    pub segments: Vec<SegmentOutcome>,
    pub plan: NominalPlan,
    pub metric_trace: Vec<f64>,
}

impl MissionRun {
    pub fn min_metric(&self) -> f64 {
        self.metric_trace
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Plans every segment in order, each from the previous segment's terminal
/// beliefs, and chains the results. Offline missions use a convergence
/// stop; online missions bound each segment's planning time instead, and
/// the budget includes the per-iteration communication delay.
pub fn run_mission(mission: &MissionSpec) -> Result<MissionRun> {
    mission.validate()?;
    let mut initial = mission.initial_beliefs()?;
    let mut segments: Vec<SegmentOutcome> = Vec::with_capacity(mission.segments.len());
    for s in 0..mission.segments.len() {
        let problem = team_problem(mission, s)?;
        let guess = lqr_initial_guess(&problem, mission, s, &initial)?;
        let outcome = admm::plan(&problem, &guess, &mission.admm, &mission.stop)?;
        let terminal = outcome.plan.beliefs_at(mission.horizon);
        segments.push(SegmentOutcome {
            outcome,
            initial_beliefs: initial,
        });
        initial = terminal;
    }

    let n = mission.n_robots();
    let horizon = mission.horizon;
    let mut inputs: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut beliefs: Vec<Vec<Belief>> = Vec::with_capacity(n);
    for i in 0..n {
        let dim = segments[0].outcome.plan.inputs[i].ncols();
        let mut rows = DMatrix::zeros(horizon * segments.len(), dim);
        let mut seq: Vec<Belief> = Vec::with_capacity(horizon * segments.len() + 1);
        seq.push(segments[0].outcome.plan.beliefs[i][0].clone());
        for (s, segment) in segments.iter().enumerate() {
            rows.view_mut((s * horizon, 0), (horizon, dim))
                .copy_from(&segment.outcome.plan.inputs[i]);
            seq.extend(segment.outcome.plan.beliefs[i][1..].iter().cloned());
        }
        inputs.push(rows);
        beliefs.push(seq);
    }
    let plan = NominalPlan { inputs, beliefs };

    let problem = team_problem(mission, 0)?;
    let mut metric_trace = Vec::with_capacity(plan.horizon() + 1);
    for t in 0..=plan.horizon() {
        metric_trace.push(problem.engine.evaluate(&plan.beliefs_at(t))?.lambda2_lb);
    }
    Ok(MissionRun {
        segments,
        plan,
        metric_trace,
    })
}
