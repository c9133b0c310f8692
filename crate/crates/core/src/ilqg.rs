//! Belief-space trajectory optimizer for one consensus subproblem.
//!
//! Each planning iteration hands every robot a subset of the team's
//! trajectories to improve while the rest stay frozen at the consensus. The
//! subproblem is an optimal-control problem over belief dynamics: steer the
//! subset's belief trajectories so that task cost, connectivity barrier,
//! and the consensus coupling terms (dual inner product plus quadratic
//! penalty) drop, without ever letting the connectivity lower bound touch
//! its floor.
//!
//! The solver is iterative LQG: quadratize the cost along the nominal
//! trajectory, run a backward value recursion for affine feedback gains,
//! then a forward pass with backtracking that accepts the first candidate
//! which both decreases the cost and stays feasible. The connectivity
//! block of the quadratization uses the rank-one barrier curvature, so a
//! full solver iteration spends metric evaluations only on the forward
//! candidates (plus any flagged finite-difference fallbacks), not on
//! Hessian assembly.

use nalgebra::{DMatrix, DVector};

use crate::belief::{belief_g, Belief, BeliefVector, SystemModel};
use crate::error::{Error, Result};
use crate::metric::{connectivity_cost, rank1_hessian, MetricEngine, MetricEvaluation};

/// Step for the central-difference Jacobians of the belief dynamics.
const DYNAMICS_FD_STEP: f64 = 1e-6;

/// Backtracking factors tried by the forward pass, in order.
const LINE_SEARCH_ALPHAS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

/// Levenberg shift schedule for the value recursion.
const MU_INIT: f64 = 1e-6;
const MU_MIN: f64 = 1e-9;
const MU_MAX: f64 = 1e3;
/// Eigenvalue floor enforced on the regularized input-cost block.
const QUU_EIG_FLOOR: f64 = 1e-6;

/// Quadratic terminal-state and running-input objective for one robot.
///
/// Terminal cost `(mean - x_desired)' w_terminal (mean - x_desired)` is
/// charged on the belief mean at the horizon; every interior step pays
/// `u' w_input u`. A robot with no destination of its own (a pure relay)
/// uses a terminal weight that ignores position.
#[derive(Debug, Clone)]
pub struct RobotObjective {
    pub x_desired: DVector<f64>,
    pub w_terminal: DMatrix<f64>,
    pub w_input: DMatrix<f64>,
}

impl RobotObjective {
    fn validate(&self, state_dim: usize, input_dim: usize) -> Result<()> {
        if self.x_desired.len() != state_dim {
            return Err(Error::Config(format!(
                "desired state has dimension {}, expected {state_dim}",
                self.x_desired.len()
            )));
        }
        for (name, m, d) in [
            ("terminal weight", &self.w_terminal, state_dim),
            ("input weight", &self.w_input, input_dim),
        ] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::Config(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if (m - m.transpose()).amax() > 1e-12 {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
        }
        Ok(())
    }
}

/// Everything fixed across a planning run: per-robot dynamics models,
/// objectives, the shared connectivity metric, and the input magnitude cap.
pub struct TeamProblem {
    pub models: Vec<Box<dyn SystemModel>>,
    pub objectives: Vec<RobotObjective>,
    pub engine: MetricEngine,
    /// Euclidean-norm cap applied to every robot's input vector.
    pub input_limit: f64,
}

impl TeamProblem {
    pub fn n_robots(&self) -> usize {
        self.models.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.models.len();
        if n == 0 {
            return Err(Error::Config("a team needs at least one robot".into()));
        }
        if self.objectives.len() != n {
            return Err(Error::Config(format!(
                "{} objectives for {n} robots",
                self.objectives.len()
            )));
        }
        if self.engine.config().n_robots != n {
            return Err(Error::Config(format!(
                "metric is configured for {} robots, team has {n}",
                self.engine.config().n_robots
            )));
        }
        if !(self.input_limit > 0.0) {
            return Err(Error::Config(format!(
                "input limit must be positive, got {}",
                self.input_limit
            )));
        }
        for (i, (model, obj)) in self.models.iter().zip(&self.objectives).enumerate() {
            obj.validate(model.state_dim(), model.input_dim())
                .map_err(|e| Error::Config(format!("robot {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Scales `u` down to the norm cap when it exceeds it.
pub fn clamp_input_norm(u: &DVector<f64>, limit: f64) -> DVector<f64> {
    let norm = u.norm();
    if norm > limit {
        u * (limit / norm)
    } else {
        u.clone()
    }
}

/// A full-team nominal trajectory: per-robot input sequences and the belief
/// sequences they induce through the deterministic belief dynamics.
#[derive(Debug, Clone)]
pub struct NominalPlan {
    /// Per robot: horizon x input_dim, row `t` applied between `t` and `t+1`.
    pub inputs: Vec<DMatrix<f64>>,
    /// Per robot: horizon + 1 beliefs, starting at the mission initial belief.
    pub beliefs: Vec<Vec<Belief>>,
}

impl NominalPlan {
    /// Propagates every robot's beliefs from its initial belief through the
    /// input rows, so the plan satisfies the recursion by construction.
    pub fn from_inputs(
        problem: &TeamProblem,
        initial: &[Belief],
        inputs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = problem.n_robots();
        if initial.len() != n || inputs.len() != n {
            return Err(Error::Config(format!(
                "plan construction got {} initial beliefs and {} input sequences for {n} robots",
                initial.len(),
                inputs.len()
            )));
        }
        let horizon = inputs[0].nrows();
        let mut beliefs = Vec::with_capacity(n);
        for i in 0..n {
            if inputs[i].nrows() != horizon {
                return Err(Error::Config(format!(
                    "robot {i} has {} input rows, expected {horizon}",
                    inputs[i].nrows()
                )));
            }
            if inputs[i].ncols() != problem.models[i].input_dim() {
                return Err(Error::Config(format!(
                    "robot {i} input dimension {} does not match its model ({})",
                    inputs[i].ncols(),
                    problem.models[i].input_dim()
                )));
            }
            let mut seq = Vec::with_capacity(horizon + 1);
            seq.push(initial[i].clone());
            for t in 0..horizon {
                let u = inputs[i].row(t).transpose();
                let next = belief_g(problem.models[i].as_ref(), &seq[t], &u)?;
                seq.push(next);
            }
            beliefs.push(seq);
        }
        Ok(Self { inputs, beliefs })
    }

    pub fn n_robots(&self) -> usize {
        self.inputs.len()
    }

    pub fn horizon(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.nrows())
    }

    /// All robots' beliefs at one timestep, cloned in robot order.
    pub fn beliefs_at(&self, t: usize) -> Vec<Belief> {
        self.beliefs.iter().map(|seq| seq[t].clone()).collect()
    }

    /// Checks the plan against the belief recursion it claims to satisfy:
    /// every stored belief must match a fresh propagation within 1e-9 in
    /// every mean and covariance coordinate.
    pub fn validate(&self, problem: &TeamProblem) -> Result<()> {
        let horizon = self.horizon();
        for i in 0..self.n_robots() {
            if self.beliefs[i].len() != horizon + 1 {
                return Err(Error::Config(format!(
                    "robot {i} has {} beliefs for horizon {horizon}",
                    self.beliefs[i].len()
                )));
            }
            for t in 0..horizon {
                let u = self.inputs[i].row(t).transpose();
                let next = belief_g(problem.models[i].as_ref(), &self.beliefs[i][t], &u)?;
                let got = BeliefVector::from_belief(&self.beliefs[i][t + 1]);
                let want = BeliefVector::from_belief(&next);
                let err = (got.as_vector() - want.as_vector()).amax();
                if err > 1e-9 {
                    return Err(Error::Config(format!(
                        "robot {i} belief at step {} deviates from the recursion by {err:.3e}",
                        t + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Replaces one robot's input rows and re-propagates its beliefs.
    pub fn replace_inputs(
        &mut self,
        problem: &TeamProblem,
        robot: usize,
        inputs: DMatrix<f64>,
    ) -> Result<()> {
        if inputs.nrows() != self.horizon() || inputs.ncols() != self.inputs[robot].ncols() {
            return Err(Error::Config(format!(
                "replacement inputs for robot {robot} are {}x{}, expected {}x{}",
                inputs.nrows(),
                inputs.ncols(),
                self.horizon(),
                self.inputs[robot].ncols()
            )));
        }
        let initial = self.beliefs[robot][0].clone();
        let mut seq = Vec::with_capacity(inputs.nrows() + 1);
        seq.push(initial);
        for t in 0..inputs.nrows() {
            let u = inputs.row(t).transpose();
            let next = belief_g(problem.models[robot].as_ref(), &seq[t], &u)?;
            seq.push(next);
        }
        self.inputs[robot] = inputs;
        self.beliefs[robot] = seq;
        Ok(())
    }
}

/// Consensus coupling terms for one subset solve: the dual rows, the
/// consensus rows they are measured against, and the penalty weight.
#[derive(Debug, Clone)]
pub struct AugmentedCostTerms {
    /// Per subset robot: horizon x input_dim dual rows.
    pub dual: Vec<DMatrix<f64>>,
    /// Per subset robot: horizon x input_dim consensus rows.
    pub consensus: Vec<DMatrix<f64>>,
    pub rho: f64,
}

impl AugmentedCostTerms {
    pub fn new(dual: Vec<DMatrix<f64>>, consensus: Vec<DMatrix<f64>>, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::Config(format!(
                "consensus penalty weight must be positive, got {rho}"
            )));
        }
        if dual.len() != consensus.len() {
            return Err(Error::Config(format!(
                "{} dual blocks against {} consensus blocks",
                dual.len(),
                consensus.len()
            )));
        }
        for (y, u) in dual.iter().zip(consensus.iter()) {
            if y.shape() != u.shape() {
                return Err(Error::Config(
                    "dual and consensus blocks must share shapes".into(),
                ));
            }
        }
        Ok(Self {
            dual,
            consensus,
            rho,
        })
    }

    /// No consensus coupling at all: zero dual, zero penalty. Used when the
    /// optimizer runs standalone rather than inside a consensus iteration.
    pub fn inactive(subset_input_dims: &[usize], horizon: usize) -> Self {
        let zeros = |d: &usize| DMatrix::zeros(horizon, *d);
        Self {
            dual: subset_input_dims.iter().map(zeros).collect(),
            consensus: subset_input_dims.iter().map(zeros).collect(),
            rho: 0.0,
        }
    }

    fn check_subset(&self, problem: &TeamProblem, subset: &[usize], horizon: usize) -> Result<()> {
        if self.dual.len() != subset.len() {
            return Err(Error::Config(format!(
                "{} coupling blocks for a subset of {}",
                self.dual.len(),
                subset.len()
            )));
        }
        for (v, &robot) in subset.iter().enumerate() {
            let dim = problem.models[robot].input_dim();
            if self.dual[v].nrows() != horizon || self.dual[v].ncols() != dim {
                return Err(Error::Config(format!(
                    "coupling block {v} is {}x{}, expected {horizon}x{dim}",
                    self.dual[v].nrows(),
                    self.dual[v].ncols()
                )));
            }
        }
        Ok(())
    }
}

/// One timestep of the quadratized cost in stacked subset coordinates:
/// belief block `c_bb`, input block `c_uu`, cross block `c_bu` (input rows,
/// belief columns), linear terms, and the constant.
#[derive(Debug, Clone)]
pub struct QuadraticCostSlice {
    pub c_bb: DMatrix<f64>,
    pub c_bu: DMatrix<f64>,
    pub c_uu: DMatrix<f64>,
    pub c_b: DVector<f64>,
    pub c_u: DVector<f64>,
    pub c0: f64,
}

impl QuadraticCostSlice {
    /// Evaluates the quadratic model at a perturbation from the nominal.
    pub fn predict(&self, db: &DVector<f64>, du: &DVector<f64>) -> f64 {
        let mut v = self.c0 + self.c_b.dot(db) + self.c_u.dot(du);
        v += 0.5 * (db.transpose() * &self.c_bb * db)[(0, 0)];
        v += (du.transpose() * &self.c_bu * db)[(0, 0)];
        v += 0.5 * (du.transpose() * &self.c_uu * du)[(0, 0)];
        v
    }
}

/// Belief-coordinate dimensions and stacked offsets for a subset.
struct SubsetLayout {
    belief_dims: Vec<usize>,
    belief_offsets: Vec<usize>,
    input_dims: Vec<usize>,
    input_offsets: Vec<usize>,
    belief_total: usize,
    input_total: usize,
}

impl SubsetLayout {
    fn new(problem: &TeamProblem, subset: &[usize]) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::Config("subset must not be empty".into()));
        }
        let n = problem.n_robots();
        let mut seen = vec![false; n];
        for &r in subset {
            if r >= n {
                return Err(Error::Config(format!(
                    "subset robot {r} out of range for a team of {n}"
                )));
            }
            if seen[r] {
                return Err(Error::Config(format!("subset repeats robot {r}")));
            }
            seen[r] = true;
        }
        let mut belief_dims = Vec::with_capacity(subset.len());
        let mut input_dims = Vec::with_capacity(subset.len());
        for &r in subset {
            let d = problem.models[r].state_dim();
            belief_dims.push(d + d * (d + 1) / 2);
            input_dims.push(problem.models[r].input_dim());
        }
        let offsets = |dims: &[usize]| {
            dims.iter()
                .scan(0usize, |acc, &d| {
                    let o = *acc;
                    *acc += d;
                    Some(o)
                })
                .collect::<Vec<_>>()
        };
        let belief_offsets = offsets(&belief_dims);
        let input_offsets = offsets(&input_dims);
        Ok(Self {
            belief_total: belief_dims.iter().sum(),
            input_total: input_dims.iter().sum(),
            belief_dims,
            belief_offsets,
            input_dims,
            input_offsets,
        })
    }

    fn stack_beliefs(&self, subset: &[usize], beliefs: &[Belief]) -> DVector<f64> {
        let mut out = DVector::zeros(self.belief_total);
        for (v, &r) in subset.iter().enumerate() {
            let flat = BeliefVector::from_belief(&beliefs[r]);
            out.rows_mut(self.belief_offsets[v], self.belief_dims[v])
                .copy_from(flat.as_vector());
        }
        out
    }
}

/// Task, connectivity, and coupling cost of the subset at one timestep.
///
/// The connectivity term charges each subset member its team-average share
/// of the barrier, evaluated on the full system's beliefs; non-subset
/// robots therefore still influence the cost even though their
/// trajectories are frozen. The caller supplies the metric evaluation for
/// the timestep, which keeps cost assembly free of hidden metric calls.
pub fn subset_cost_with_eval(
    problem: &TeamProblem,
    eval: &MetricEvaluation,
    beliefs_t: &[Belief],
    inputs_t: Option<&[DVector<f64>]>,
    subset: &[usize],
    aug: &AugmentedCostTerms,
    t: usize,
    horizon: usize,
) -> Result<f64> {
    let cfg = problem.engine.config();
    let barrier_share =
        subset.len() as f64 / cfg.n_robots as f64 * connectivity_cost(eval.lambda2_lb, cfg)?;
    let mut cost = barrier_share;
    if t == horizon {
        if inputs_t.is_some() {
            return Err(Error::Domain("terminal timestep takes no inputs".into()));
        }
        for &r in subset {
            let obj = &problem.objectives[r];
            let err = &beliefs_t[r].mean - &obj.x_desired;
            cost += (err.transpose() * &obj.w_terminal * &err)[(0, 0)];
        }
        return Ok(cost);
    }
    let inputs = inputs_t.ok_or_else(|| {
        Error::Domain(format!("interior timestep {t} requires subset inputs"))
    })?;
    if inputs.len() != subset.len() {
        return Err(Error::Domain(format!(
            "{} inputs for a subset of {}",
            inputs.len(),
            subset.len()
        )));
    }
    for (v, &r) in subset.iter().enumerate() {
        let u = &inputs[v];
        cost += (u.transpose() * &problem.objectives[r].w_input * u)[(0, 0)];
        let residual = u - aug.consensus[v].row(t).transpose();
        cost += aug.dual[v].row(t).transpose().dot(&residual);
        cost += 0.5 * aug.rho * residual.norm_squared();
    }
    Ok(cost)
}

/// [`subset_cost_with_eval`] with the metric evaluated here (one counted
/// evaluation).
pub fn subset_cost(
    problem: &TeamProblem,
    beliefs_t: &[Belief],
    inputs_t: Option<&[DVector<f64>]>,
    subset: &[usize],
    aug: &AugmentedCostTerms,
    t: usize,
    horizon: usize,
) -> Result<f64> {
    let eval = problem.engine.evaluate(beliefs_t)?;
    subset_cost_with_eval(problem, &eval, beliefs_t, inputs_t, subset, aug, t, horizon)
}

/// Quadratizes the subset cost at one timestep of a nominal trajectory.
///
/// The task and coupling terms are quadratic already, so their blocks are
/// exact. The barrier enters through its rank-one curvature model: one
/// outer product of the metric gradient, scaled by the barrier's first and
/// second derivatives in the bound. No fresh metric evaluation is spent
/// here beyond the finite-difference fallbacks the gradient may need for
/// flagged covariance coordinates.
pub fn quadratize(
    problem: &TeamProblem,
    eval: &MetricEvaluation,
    beliefs_t: &[Belief],
    inputs_t: Option<&[DVector<f64>]>,
    subset: &[usize],
    aug: &AugmentedCostTerms,
    t: usize,
    horizon: usize,
) -> Result<QuadraticCostSlice> {
    let layout = SubsetLayout::new(problem, subset)?;
    let cfg = problem.engine.config();
    let share = subset.len() as f64 / cfg.n_robots as f64;

    let grads = problem.engine.gradient_with_fallback(eval, beliefs_t)?;
    let mut direction = DVector::zeros(layout.belief_total);
    for (v, &r) in subset.iter().enumerate() {
        direction
            .rows_mut(layout.belief_offsets[v], layout.belief_dims[v])
            .copy_from(&grads[r]);
    }
    let barrier = rank1_hessian(eval, direction, cfg)?;

    let mut c_bb = DMatrix::zeros(layout.belief_total, layout.belief_total);
    let mut c_b = DVector::zeros(layout.belief_total);
    let mut c0 = share * barrier.value;
    c_b.axpy(share * barrier.slope, &barrier.direction, 1.0);
    // Rank-one update keeps the barrier block PSD: curvature > 0 always.
    c_bb.ger(share * barrier.curvature, &barrier.direction, &barrier.direction, 1.0);

    // No cost term couples beliefs to inputs, so the cross block stays zero.
    let c_bu = DMatrix::zeros(layout.input_total, layout.belief_total);
    let mut c_uu = DMatrix::zeros(layout.input_total, layout.input_total);
    let mut c_u = DVector::zeros(layout.input_total);

    if t == horizon {
        if inputs_t.is_some() {
            return Err(Error::Domain("terminal timestep takes no inputs".into()));
        }
        for (v, &r) in subset.iter().enumerate() {
            let obj = &problem.objectives[r];
            let state_dim = problem.models[r].state_dim();
            let err = &beliefs_t[r].mean - &obj.x_desired;
            c0 += (err.transpose() * &obj.w_terminal * &err)[(0, 0)];
            let o = layout.belief_offsets[v];
            c_b.rows_mut(o, state_dim)
                .axpy(2.0, &(&obj.w_terminal * &err), 1.0);
            let mut block = c_bb.view_mut((o, o), (state_dim, state_dim));
            block += obj.w_terminal.scale(2.0);
        }
        return Ok(QuadraticCostSlice {
            c_bb,
            c_bu,
            c_uu,
            c_b,
            c_u,
            c0,
        });
    }

    let inputs = inputs_t.ok_or_else(|| {
        Error::Domain(format!("interior timestep {t} requires subset inputs"))
    })?;
    for (v, &r) in subset.iter().enumerate() {
        let obj = &problem.objectives[r];
        let u = &inputs[v];
        let o = layout.input_offsets[v];
        let dim = layout.input_dims[v];
        let residual = u - aug.consensus[v].row(t).transpose();
        let y = aug.dual[v].row(t).transpose();

        c0 += (u.transpose() * &obj.w_input * u)[(0, 0)]
            + y.dot(&residual)
            + 0.5 * aug.rho * residual.norm_squared();
        let mut cu_block = c_u.rows_mut(o, dim);
        cu_block.axpy(2.0, &(&obj.w_input * u), 1.0);
        cu_block.axpy(1.0, &y, 1.0);
        cu_block.axpy(aug.rho, &residual, 1.0);
        let mut cuu_block = c_uu.view_mut((o, o), (dim, dim));
        cuu_block += obj.w_input.scale(2.0);
        for d in 0..dim {
            cuu_block[(d, d)] += aug.rho;
        }
    }
    Ok(QuadraticCostSlice {
        c_bb,
        c_bu,
        c_uu,
        c_b,
        c_u,
        c0,
    })
}

/// Full-team transformed cost of a plan: every robot's task cost plus the
/// barrier, summed over the horizon. `evals` must hold one metric
/// evaluation per timestep of the plan.
pub fn transformed_cost(
    problem: &TeamProblem,
    plan: &NominalPlan,
    evals: &[MetricEvaluation],
) -> Result<f64> {
    let horizon = plan.horizon();
    if evals.len() != horizon + 1 {
        return Err(Error::Domain(format!(
            "{} metric evaluations for horizon {horizon}",
            evals.len()
        )));
    }
    let cfg = problem.engine.config();
    let mut cost = 0.0;
    for eval in evals {
        cost += connectivity_cost(eval.lambda2_lb, cfg)?;
    }
    for i in 0..problem.n_robots() {
        let obj = &problem.objectives[i];
        for t in 0..horizon {
            let u = plan.inputs[i].row(t).transpose();
            cost += (u.transpose() * &obj.w_input * u)[(0, 0)];
        }
        let err = &plan.beliefs[i][horizon].mean - &obj.x_desired;
        cost += (err.transpose() * &obj.w_terminal * &err)[(0, 0)];
    }
    Ok(cost)
}

/// Central-difference Jacobians of the belief dynamics for one robot:
/// sensitivity of the next belief to the current belief and to the input,
/// both in flattened belief coordinates.
fn belief_jacobians(
    model: &dyn SystemModel,
    belief: &Belief,
    u: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let flat = BeliefVector::from_belief(belief);
    let dim = flat.len();
    let m = u.len();
    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DMatrix::zeros(dim, m);
    for c in 0..dim {
        let mut sides = [DVector::zeros(dim), DVector::zeros(dim)];
        for (slot, sign) in [(0usize, 1.0), (1usize, -1.0)] {
            let moved = flat.perturbed(c, sign * DYNAMICS_FD_STEP).to_belief()?;
            let next = belief_g(model, &moved, u)?;
            sides[slot] = BeliefVector::from_belief(&next).as_vector().clone();
        }
        let col = (&sides[0] - &sides[1]) / (2.0 * DYNAMICS_FD_STEP);
        a.column_mut(c).copy_from(&col);
    }
    for c in 0..m {
        let mut sides = [DVector::zeros(dim), DVector::zeros(dim)];
        for (slot, sign) in [(0usize, 1.0), (1usize, -1.0)] {
            let mut moved = u.clone();
            moved[c] += sign * DYNAMICS_FD_STEP;
            let next = belief_g(model, belief, &moved)?;
            sides[slot] = BeliefVector::from_belief(&next).as_vector().clone();
        }
        let col = (&sides[0] - &sides[1]) / (2.0 * DYNAMICS_FD_STEP);
        b.column_mut(c).copy_from(&col);
    }
    Ok((a, b))
}

/// Affine feedback policy from the backward pass.
struct BackwardPass {
    /// Feedforward steps, one per interior timestep.
    k: Vec<DVector<f64>>,
    /// Feedback gains on the stacked belief deviation.
    big_k: Vec<DMatrix<f64>>,
}

/// Feedforward and feedback gains from the regularized input block: the
/// spectrum of `q_uu` is shifted by at least `mu`, and further if needed so
/// every eigenvalue clears the floor, before solving against `q_u` and
/// `q_ub`.
fn regularized_solve(
    q_uu: &DMatrix<f64>,
    mu: f64,
    q_u: &DVector<f64>,
    q_ub: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sym = (q_uu + q_uu.transpose()) * 0.5;
    let eig = crate::spectral::symmetric_eigendecomposition(&sym)?;
    let min_eig = eig.eigenvalues[0];
    let shift = mu.max(QUU_EIG_FLOOR - min_eig).max(0.0);
    let inv_diag: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| 1.0 / (l + shift).max(QUU_EIG_FLOOR))
        .collect();
    let vt = eig.eigenvectors.transpose();
    let apply_vec = |rhs: &DVector<f64>| -> DVector<f64> {
        let mut w = &vt * rhs;
        for (i, wi) in w.iter_mut().enumerate() {
            *wi *= inv_diag[i];
        }
        &eig.eigenvectors * w
    };
    let k = -apply_vec(q_u);
    let mut big_k = DMatrix::zeros(q_ub.nrows(), q_ub.ncols());
    for c in 0..q_ub.ncols() {
        let col = -apply_vec(&q_ub.column(c).into_owned());
        big_k.column_mut(c).copy_from(&col);
    }
    if k.iter().any(|v| !v.is_finite()) || big_k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "value recursion produced non-finite gains".into(),
        ));
    }
    Ok((k, big_k))
}

/// Outcome of a subset solve. When no feasible descent was found the
/// initial inputs come back unchanged with `improved` false; the caller
/// treats that as a no-op, not a failure.
#[derive(Debug, Clone)]
pub struct IlqgOutcome {
    /// Optimized input rows, one matrix per subset robot.
    pub inputs: Vec<DMatrix<f64>>,
    /// Re-propagated belief sequences for the subset robots.
    pub beliefs: Vec<Vec<Belief>>,
    pub cost: f64,
    pub initial_cost: f64,
    pub improved: bool,
    pub iterations_used: usize,
    /// Counted metric evaluations per solver iteration (entry feasibility
    /// and cost evaluation is charged to the first iteration).
    pub iteration_evaluations: Vec<u64>,
}

struct SubsetTrajectory {
    /// Per subset robot input sequences.
    inputs: Vec<DMatrix<f64>>,
    /// Per subset robot belief sequences.
    beliefs: Vec<Vec<Belief>>,
    /// Full-system beliefs per timestep (frozen robots included).
    full: Vec<Vec<Belief>>,
    /// Metric evaluation per timestep.
    evals: Vec<MetricEvaluation>,
    cost: f64,
}

/// Optimizes the subset's input rows of `base` against the augmented cost,
/// holding every other robot frozen at its `base` trajectory.
///
/// Iterates up to `budget` rounds of quadratize / backward recursion /
/// backtracking forward pass. A forward candidate is accepted only when it
/// strictly decreases the augmented cost and keeps the connectivity bound
/// above its floor at every timestep, so the returned trajectory never
/// trades feasibility for cost. `cached_evals`, when given, must be the
/// metric evaluations along `base` and saves the entry sweep.
pub fn ilqg_solve(
    problem: &TeamProblem,
    base: &NominalPlan,
    subset: &[usize],
    aug: &AugmentedCostTerms,
    budget: usize,
    cached_evals: Option<&[MetricEvaluation]>,
) -> Result<IlqgOutcome> {
    let horizon = base.horizon();
    if horizon == 0 {
        return Err(Error::Config("cannot optimize a zero-step plan".into()));
    }
    let layout = SubsetLayout::new(problem, subset)?;
    aug.check_subset(problem, subset, horizon)?;
    let epsilon = problem.engine.config().epsilon;

    let evals_before = problem.engine.evaluations();
    let mut iteration_evaluations: Vec<u64> = Vec::new();
    let mut last_counter = evals_before;

    // Entry sweep: metric along the nominal, feasibility check, initial cost.
    let full: Vec<Vec<Belief>> = (0..=horizon).map(|t| base.beliefs_at(t)).collect();
    let evals: Vec<MetricEvaluation> = match cached_evals {
        Some(cache) if cache.len() == horizon + 1 => cache.to_vec(),
        Some(cache) => {
            return Err(Error::Domain(format!(
                "{} cached evaluations for horizon {horizon}",
                cache.len()
            )))
        }
        None => full
            .iter()
            .map(|beliefs| problem.engine.evaluate(beliefs))
            .collect::<Result<_>>()?,
    };
    for eval in &evals {
        if eval.lambda2_lb <= epsilon {
            return Err(Error::BarrierViolation {
                lambda2_lb: eval.lambda2_lb,
                epsilon,
            });
        }
    }
    let subset_inputs_at = |inputs: &[DMatrix<f64>], t: usize| -> Vec<DVector<f64>> {
        inputs.iter().map(|m| m.row(t).transpose()).collect()
    };
    let trajectory_cost = |full: &[Vec<Belief>],
                           evals: &[MetricEvaluation],
                           inputs: &[DMatrix<f64>]|
     -> Result<f64> {
        let mut cost = 0.0;
        for t in 0..=horizon {
            let inputs_t = if t < horizon {
                Some(subset_inputs_at(inputs, t))
            } else {
                None
            };
            cost += subset_cost_with_eval(
                problem,
                &evals[t],
                &full[t],
                inputs_t.as_deref(),
                subset,
                aug,
                t,
                horizon,
            )?;
        }
        Ok(cost)
    };

    let initial_inputs: Vec<DMatrix<f64>> =
        subset.iter().map(|&r| base.inputs[r].clone()).collect();
    let initial_beliefs: Vec<Vec<Belief>> =
        subset.iter().map(|&r| base.beliefs[r].clone()).collect();
    let initial_cost = trajectory_cost(&full, &evals, &initial_inputs)?;

    let mut nominal = SubsetTrajectory {
        inputs: initial_inputs.clone(),
        beliefs: initial_beliefs.clone(),
        full,
        evals,
        cost: initial_cost,
    };
    let mut mu = MU_INIT;
    let mut improved = false;
    let mut iterations_used = 0;

    for _ in 0..budget {
        iterations_used += 1;

        // Quadratize along the nominal; metric evaluations here are only
        // the finite-difference fallbacks for flagged covariance blocks.
        let mut slices = Vec::with_capacity(horizon + 1);
        let mut quadratize_failed = false;
        for t in 0..=horizon {
            let inputs_t = if t < horizon {
                Some(subset_inputs_at(&nominal.inputs, t))
            } else {
                None
            };
            match quadratize(
                problem,
                &nominal.evals[t],
                &nominal.full[t],
                inputs_t.as_deref(),
                subset,
                aug,
                t,
                horizon,
            ) {
                Ok(slice) => slices.push(slice),
                Err(Error::GradientUndefined(_)) | Err(Error::Singularity(_)) => {
                    // A degenerate nominal point stalls this round; a larger
                    // shift on the next round changes the step enough to
                    // move off it in practice.
                    quadratize_failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if quadratize_failed {
            mu = (mu * 10.0).min(MU_MAX);
            let counter = problem.engine.evaluations();
            iteration_evaluations.push(counter - last_counter);
            last_counter = counter;
            continue;
        }

        // Backward value recursion over the stacked subset coordinates.
        let mut value = slices[horizon].c_bb.clone();
        let mut value_lin = slices[horizon].c_b.clone();
        let mut pass = BackwardPass {
            k: vec![DVector::zeros(0); horizon],
            big_k: vec![DMatrix::zeros(0, 0); horizon],
        };
        let mut backward_ok = true;
        for t in (0..horizon).rev() {
            let mut a = DMatrix::zeros(layout.belief_total, layout.belief_total);
            let mut b = DMatrix::zeros(layout.belief_total, layout.input_total);
            for (v, &r) in subset.iter().enumerate() {
                let u = nominal.inputs[v].row(t).transpose();
                let (aj, bj) = belief_jacobians(
                    problem.models[r].as_ref(),
                    &nominal.beliefs[v][t],
                    &u,
                )?;
                a.view_mut(
                    (layout.belief_offsets[v], layout.belief_offsets[v]),
                    (layout.belief_dims[v], layout.belief_dims[v]),
                )
                .copy_from(&aj);
                b.view_mut(
                    (layout.belief_offsets[v], layout.input_offsets[v]),
                    (layout.belief_dims[v], layout.input_dims[v]),
                )
                .copy_from(&bj);
            }
            let slice = &slices[t];
            let q_b = &slice.c_b + a.transpose() * &value_lin;
            let q_u = &slice.c_u + b.transpose() * &value_lin;
            let q_bb = &slice.c_bb + a.transpose() * &value * &a;
            let q_ub = &slice.c_bu + b.transpose() * &value * &a;
            let q_uu = &slice.c_uu + b.transpose() * &value * &b;
            match regularized_solve(&q_uu, mu, &q_u, &q_ub) {
                Ok((k, big_k)) => {
                    value = &q_bb
                        + big_k.transpose() * &q_uu * &big_k
                        + big_k.transpose() * &q_ub
                        + q_ub.transpose() * &big_k;
                    value = (&value + value.transpose()) * 0.5;
                    value_lin = &q_b
                        + big_k.transpose() * (&q_uu * &k)
                        + big_k.transpose() * &q_u
                        + q_ub.transpose() * &k;
                    pass.k[t] = k;
                    pass.big_k[t] = big_k;
                }
                Err(_) => {
                    backward_ok = false;
                    break;
                }
            }
        }
        if !backward_ok {
            mu = (mu * 10.0).min(MU_MAX);
            let counter = problem.engine.evaluations();
            iteration_evaluations.push(counter - last_counter);
            last_counter = counter;
            continue;
        }

        // Forward pass: first backtracked candidate that is both feasible
        // and strictly cheaper wins.
        let mut accepted: Option<SubsetTrajectory> = None;
        'candidates: for &alpha in &LINE_SEARCH_ALPHAS {
            let mut cand_inputs: Vec<DMatrix<f64>> = nominal
                .inputs
                .iter()
                .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
                .collect();
            let mut cand_beliefs: Vec<Vec<Belief>> = subset
                .iter()
                .enumerate()
                .map(|(v, _)| vec![nominal.beliefs[v][0].clone()])
                .collect();
            let mut cand_full: Vec<Vec<Belief>> = vec![nominal.full[0].clone()];
            // The first timestep's beliefs equal the nominal's, so its
            // metric evaluation carries over without a fresh count.
            let mut cand_evals: Vec<MetricEvaluation> = vec![nominal.evals[0].clone()];

            for t in 0..horizon {
                let nominal_stack = layout.stack_beliefs(subset, &nominal.full[t]);
                let current_stack = layout.stack_beliefs(subset, &cand_full[t]);
                let db = current_stack - nominal_stack;
                let du = &pass.k[t] * alpha + &pass.big_k[t] * &db;
                let mut full_t1: Vec<Belief> = nominal.full[t + 1].clone();
                for (v, &r) in subset.iter().enumerate() {
                    let u_nom = nominal.inputs[v].row(t).transpose();
                    let u_new = clamp_input_norm(
                        &(u_nom + du.rows(layout.input_offsets[v], layout.input_dims[v])),
                        problem.input_limit,
                    );
                    cand_inputs[v].row_mut(t).copy_from(&u_new.transpose());
                    let next =
                        belief_g(problem.models[r].as_ref(), &cand_beliefs[v][t], &u_new)?;
                    full_t1[r] = next.clone();
                    cand_beliefs[v].push(next);
                }
                let eval = problem.engine.evaluate(&full_t1)?;
                if eval.lambda2_lb <= epsilon {
                    continue 'candidates;
                }
                cand_full.push(full_t1);
                cand_evals.push(eval);
            }
            let cost = trajectory_cost(&cand_full, &cand_evals, &cand_inputs)?;
            if cost < nominal.cost {
                accepted = Some(SubsetTrajectory {
                    inputs: cand_inputs,
                    beliefs: cand_beliefs,
                    full: cand_full,
                    evals: cand_evals,
                    cost,
                });
                break;
            }
        }

        let counter = problem.engine.evaluations();
        iteration_evaluations.push(counter - last_counter);
        last_counter = counter;

        match accepted {
            Some(next) => {
                let relative_drop = (nominal.cost - next.cost) / nominal.cost.abs().max(1.0);
                nominal = next;
                improved = true;
                mu = (mu / 10.0).max(MU_MIN);
                if relative_drop < 1e-10 {
                    break;
                }
            }
            None => {
                mu = (mu * 10.0).min(MU_MAX);
            }
        }
    }

    Ok(IlqgOutcome {
        inputs: if improved {
            nominal.inputs
        } else {
            initial_inputs
        },
        beliefs: if improved {
            nominal.beliefs
        } else {
            initial_beliefs
        },
        cost: if improved { nominal.cost } else { initial_cost },
        initial_cost,
        improved,
        iterations_used,
        iteration_evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::LinearSystemModel;
    use crate::metric::ConnectivityConfig;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn double_integrator(dt: f64) -> LinearSystemModel {
        let f = dmatrix![
            1.0, 0.0, dt, 0.0;
            0.0, 1.0, 0.0, dt;
            0.0, 0.0, 1.0, 0.0;
            0.0, 0.0, 0.0, 1.0
        ];
        let b = dmatrix![
            0.5 * dt * dt, 0.0;
            0.0, 0.5 * dt * dt;
            dt, 0.0;
            0.0, dt
        ];
        let q3 = dt * dt * dt / 3.0;
        let q2 = dt * dt / 2.0;
        let q = 0.1
            * dmatrix![
                q3, 0.0, q2, 0.0;
                0.0, q3, 0.0, q2;
                q2, 0.0, dt, 0.0;
                0.0, q2, 0.0, dt
            ];
        let h = dmatrix![
            1.0, 0.0, 0.0, 0.0;
            0.0, 1.0, 0.0, 0.0
        ];
        let r = DMatrix::identity(2, 2);
        LinearSystemModel::new(f, b, h, q, r, vec![0, 1]).unwrap()
    }

    fn config(n: usize) -> ConnectivityConfig {
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

    fn belief_at(x: f64, y: f64, pos_var: (f64, f64)) -> Belief {
        let mean = dvector![x, y, 0.0, 0.0];
        let cov = DMatrix::from_diagonal(&dvector![pos_var.0, pos_var.1, 0.001, 0.001]);
        Belief::new(mean, cov).unwrap()
    }

    fn objective(x_des: DVector<f64>, w_pos: f64) -> RobotObjective {
        RobotObjective {
            x_desired: x_des,
            w_terminal: DMatrix::from_diagonal(&dvector![w_pos, w_pos, 100.0, 100.0]),
            w_input: DMatrix::identity(2, 2) * 0.01,
        }
    }

    fn problem(n: usize, targets: &[(f64, f64)]) -> TeamProblem {
        let models: Vec<Box<dyn SystemModel>> = (0..n)
            .map(|_| Box::new(double_integrator(0.2)) as Box<dyn SystemModel>)
            .collect();
        let objectives = (0..n)
            .map(|i| objective(dvector![targets[i].0, targets[i].1, 0.0, 0.0], 1.0))
            .collect();
        TeamProblem {
            models,
            objectives,
            engine: MetricEngine::new(config(n), vec![0, 1]).unwrap(),
            input_limit: 5.0,
        }
    }

    fn hover_plan(problem: &TeamProblem, positions: &[(f64, f64)], horizon: usize) -> NominalPlan {
        let initial: Vec<Belief> = positions
            .iter()
            .map(|&(x, y)| belief_at(x, y, (0.1, 0.1)))
            .collect();
        let inputs = vec![DMatrix::zeros(horizon, 2); positions.len()];
        NominalPlan::from_inputs(problem, &initial, inputs).unwrap()
    }

    #[test]
    fn plan_propagation_satisfies_the_recursion_and_validate_catches_tampering() {
        let prob = problem(2, &[(1.0, 0.0), (5.0, 0.0)]);
        let mut plan = hover_plan(&prob, &[(0.0, 0.0), (5.0, 0.0)], 8);
        plan.validate(&prob).unwrap();
        plan.beliefs[1][4].mean[0] += 1e-6;
        assert!(plan.validate(&prob).is_err());
    }

    #[test]
    fn replace_inputs_repropagates_only_that_robot() {
        let prob = problem(2, &[(1.0, 0.0), (5.0, 0.0)]);
        let mut plan = hover_plan(&prob, &[(0.0, 0.0), (5.0, 0.0)], 6);
        let before = plan.beliefs[1][6].mean.clone();
        let mut pushed = DMatrix::zeros(6, 2);
        pushed[(0, 0)] = 1.0;
        plan.replace_inputs(&prob, 0, pushed).unwrap();
        plan.validate(&prob).unwrap();
        assert!(plan.beliefs[0][6].mean[0] > 0.0);
        assert_relative_eq!(plan.beliefs[1][6].mean[0], before[0], epsilon = 1e-12);
    }

    #[test]
    fn subset_cost_terminal_reduces_to_the_barrier_share_at_the_target() {
        // One-robot subset, mean exactly at the desired state, zero inputs:
        // every quadratic term vanishes and only the per-robot share of the
        // barrier remains.
        let prob = problem(2, &[(0.0, 0.0), (5.0, 0.0)]);
        let beliefs = vec![belief_at(0.0, 0.0, (0.1, 0.1)), belief_at(5.0, 0.0, (0.1, 0.1))];
        let eval = prob.engine.evaluate(&beliefs).unwrap();
        let aug = AugmentedCostTerms::inactive(&[2], 4);
        let cost =
            subset_cost_with_eval(&prob, &eval, &beliefs, None, &[0], &aug, 4, 4).unwrap();
        let barrier = connectivity_cost(eval.lambda2_lb, prob.engine.config()).unwrap();
        assert_relative_eq!(cost, 0.5 * barrier, epsilon = 1e-14);
    }

    #[test]
    fn subset_cost_interior_charges_the_input_quadratic() {
        let prob = problem(2, &[(0.0, 0.0), (5.0, 0.0)]);
        let beliefs = vec![belief_at(0.0, 0.0, (0.1, 0.1)), belief_at(5.0, 0.0, (0.1, 0.1))];
        let eval = prob.engine.evaluate(&beliefs).unwrap();
        let aug = AugmentedCostTerms::inactive(&[2], 4);
        let inputs = vec![dvector![1.0, 0.0]];
        let cost = subset_cost_with_eval(
            &prob, &eval, &beliefs, Some(&inputs), &[0], &aug, 1, 4,
        )
        .unwrap();
        let barrier_share =
            0.5 * connectivity_cost(eval.lambda2_lb, prob.engine.config()).unwrap();
        assert_relative_eq!(cost - barrier_share, 0.01, epsilon = 1e-14);
    }

    #[test]
    fn subset_cost_penalty_term_is_half_rho_times_squared_residual() {
        let prob = problem(2, &[(0.0, 0.0), (5.0, 0.0)]);
        let beliefs = vec![belief_at(0.0, 0.0, (0.1, 0.1)), belief_at(5.0, 0.0, (0.1, 0.1))];
        let eval = prob.engine.evaluate(&beliefs).unwrap();
        // Zero dual, consensus zero, input (2,0), rho = 1: the coupling
        // contribution is (1/2)*1*4 = 2. Kill the task term by zeroing the
        // input weight.
        let mut prob = prob;
        prob.objectives[0].w_input = DMatrix::zeros(2, 2);
        let aug = AugmentedCostTerms::new(
            vec![DMatrix::zeros(4, 2)],
            vec![DMatrix::zeros(4, 2)],
            1.0,
        )
        .unwrap();
        let inputs = vec![dvector![2.0, 0.0]];
        let cost = subset_cost_with_eval(
            &prob, &eval, &beliefs, Some(&inputs), &[0], &aug, 0, 4,
        )
        .unwrap();
        let barrier_share =
            0.5 * connectivity_cost(eval.lambda2_lb, prob.engine.config()).unwrap();
        assert_relative_eq!(cost - barrier_share, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn dual_term_is_linear_in_the_residual() {
        let prob = problem(2, &[(0.0, 0.0), (5.0, 0.0)]);
        let beliefs = vec![belief_at(0.0, 0.0, (0.1, 0.1)), belief_at(5.0, 0.0, (0.1, 0.1))];
        let eval = prob.engine.evaluate(&beliefs).unwrap();
        let mut prob = prob;
        prob.objectives[0].w_input = DMatrix::zeros(2, 2);
        let mut dual = DMatrix::zeros(4, 2);
        dual[(0, 0)] = 3.0;
        let mut consensus = DMatrix::zeros(4, 2);
        consensus[(0, 0)] = 1.0;
        let aug = AugmentedCostTerms::new(vec![dual], vec![consensus], 2.0).unwrap();
        let inputs = vec![dvector![2.0, 0.0]];
        let cost = subset_cost_with_eval(
            &prob, &eval, &beliefs, Some(&inputs), &[0], &aug, 0, 4,
        )
        .unwrap();
        let barrier_share =
            0.5 * connectivity_cost(eval.lambda2_lb, prob.engine.config()).unwrap();
        // residual 1 along x: dual gives 3*1, penalty gives (2/2)*1.
        assert_relative_eq!(cost - barrier_share, 4.0, epsilon = 1e-14);
    }

    #[test]
    fn quadratize_in_the_flat_region_leaves_only_constants_from_the_barrier() {
        let prob = problem(2, &[(0.0, 0.0), (5.0, 0.0)]);
        let beliefs = vec![belief_at(0.0, 0.0, (0.1, 0.1)), belief_at(5.0, 0.0, (0.1, 0.1))];
        let eval = prob.engine.evaluate(&beliefs).unwrap();
        let aug = AugmentedCostTerms::inactive(&[2, 2], 4);
        let inputs = vec![dvector![0.0, 0.0], dvector![0.0, 0.0]];
        let slice = quadratize(
            &prob, &eval, &beliefs, Some(&inputs), &[0, 1], &aug, 0, 4,
        )
        .unwrap();
        // Flat band: metric gradient is exactly zero, so the barrier's
        // rank-one block vanishes and only its constant survives.
        assert_eq!(slice.c_bb.amax(), 0.0);
        assert_eq!(slice.c_b.amax(), 0.0);
        assert_eq!(slice.c_u.amax(), 0.0);
        let barrier = connectivity_cost(eval.lambda2_lb, prob.engine.config()).unwrap();
        assert_relative_eq!(slice.c0, barrier, epsilon = 1e-14);
    }

    #[test]
    fn quadratize_pure_input_cost_gives_twice_the_weight() {
        let prob = problem(2, &[(0.0, 0.0), (5.0, 0.0)]);
        let beliefs = vec![belief_at(0.0, 0.0, (0.1, 0.1)), belief_at(5.0, 0.0, (0.1, 0.1))];
        let eval = prob.engine.evaluate(&beliefs).unwrap();
        let aug = AugmentedCostTerms::inactive(&[2], 6);
        let inputs = vec![dvector![0.3, -0.4]];
        let slice =
            quadratize(&prob, &eval, &beliefs, Some(&inputs), &[0], &aug, 2, 6).unwrap();
        let expected = DMatrix::identity(2, 2) * 0.02;
        assert_relative_eq!((slice.c_uu.clone() - expected).amax(), 0.0, epsilon = 1e-15);
        // With an active penalty the same block gains rho on the diagonal.
        let aug_rho = AugmentedCostTerms::new(
            vec![DMatrix::zeros(6, 2)],
            vec![DMatrix::zeros(6, 2)],
            1.5,
        )
        .unwrap();
        let slice_rho =
            quadratize(&prob, &eval, &beliefs, Some(&inputs), &[0], &aug_rho, 2, 6).unwrap();
        let expected_rho = DMatrix::identity(2, 2) * (0.02 + 1.5);
        assert_relative_eq!(
            (slice_rho.c_uu.clone() - expected_rho).amax(),
            0.0,
            epsilon = 1e-15
        );
        assert_eq!(slice.c_bu.amax(), 0.0);
    }

    #[test]
    fn quadratic_model_tracks_the_direct_cost_near_the_nominal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for trial in 0..40 {
            // Pairs placed so the edge sits in the transition band, with
            // anisotropic covariances keeping every gradient analytic.
            let gap: f64 = rng.gen_range(26.0..29.5);
            let beliefs = vec![
                belief_at(0.0, 0.0, (0.23 + 0.05 * (trial as f64 % 3.0), 0.08)),
                belief_at(gap, 0.0, (0.31, 0.12)),
            ];
            let prob = problem(2, &[(0.0, 0.0), (gap, 0.0)]);
            let eval = prob.engine.evaluate(&beliefs).unwrap();
            if eval.lambda2_lb <= prob.engine.config().epsilon {
                continue;
            }
            let aug = AugmentedCostTerms::new(
                vec![DMatrix::from_element(5, 2, 0.1), DMatrix::from_element(5, 2, -0.2)],
                vec![DMatrix::zeros(5, 2), DMatrix::zeros(5, 2)],
                0.7,
            )
            .unwrap();
            let inputs = vec![dvector![0.4, -0.2], dvector![-0.1, 0.3]];
            let t = 1;
            let slice = quadratize(
                &prob, &eval, &beliefs, Some(&inputs), &[0, 1], &aug, t, 5,
            )
            .unwrap();

            let layout = SubsetLayout::new(&prob, &[0, 1]).unwrap();
            let mut db = DVector::zeros(layout.belief_total);
            let mut du = DVector::zeros(layout.input_total);
            for k in 0..db.len() {
                db[k] = rng.gen_range(-1e-3..1e-3);
            }
            for k in 0..du.len() {
                du[k] = rng.gen_range(-1e-3..1e-3);
            }
            let predicted = slice.predict(&db, &du);

            // Apply the perturbation through the same flattening the
            // quadratization differentiates.
            let mut moved = beliefs.clone();
            for (v, &r) in [0usize, 1].iter().enumerate() {
                let mut flat = BeliefVector::from_belief(&beliefs[r]);
                for c in 0..layout.belief_dims[v] {
                    flat = flat.perturbed(c, db[layout.belief_offsets[v] + c]);
                }
                moved[r] = flat.to_belief().unwrap();
            }
            let moved_inputs: Vec<DVector<f64>> = inputs
                .iter()
                .enumerate()
                .map(|(v, u)| u + du.rows(layout.input_offsets[v], layout.input_dims[v]))
                .collect();
            let direct = subset_cost(
                &prob,
                &moved,
                Some(&moved_inputs),
                &[0, 1],
                &aug,
                t,
                5,
            )
            .unwrap();
            assert_relative_eq!(predicted, direct, max_relative = 1e-3);
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} configurations were usable");
    }

    /// Finite-horizon discrete Riccati recursion for the oracle: terminal
    /// weight `p`, running input weight `r_in`, no running state cost.
    fn lqr_cost(
        f: &DMatrix<f64>,
        b: &DMatrix<f64>,
        p_terminal: &DMatrix<f64>,
        r_in: &DMatrix<f64>,
        e0: &DVector<f64>,
        horizon: usize,
    ) -> (f64, Vec<DMatrix<f64>>) {
        let mut p = p_terminal.clone();
        let mut gains = vec![DMatrix::zeros(0, 0); horizon];
        for t in (0..horizon).rev() {
            let quu = r_in + b.transpose() * &p * b;
            let qux = b.transpose() * &p * f;
            let gain = quu
                .clone()
                .try_inverse()
                .expect("oracle Riccati block invertible")
                * qux;
            p = f.transpose() * &p * (f - b * &gain);
            p = (&p + p.transpose()) * 0.5;
            gains[t] = gain;
        }
        ((e0.transpose() * &p * e0)[(0, 0)], gains)
    }

    #[test]
    fn connectivity_inactive_solve_matches_the_lqr_oracle() {
        // Two robots 5 m apart stay far inside the flat band for the whole
        // horizon, so the barrier is a constant offset and the subset solve
        // is exactly a finite-horizon LQR problem in the mean.
        let horizon = 30;
        let start = (0.0, 0.0);
        let target = (3.0, 1.0);
        let prob = problem(2, &[target, (5.0, 0.0)]);
        let plan = hover_plan(&prob, &[start, (5.0, 0.0)], horizon);
        let aug = AugmentedCostTerms::inactive(&[2], horizon);

        let outcome = ilqg_solve(&prob, &plan, &[0], &aug, 12, None).unwrap();
        assert!(outcome.improved);
        assert!(outcome.cost < outcome.initial_cost);

        let model = double_integrator(0.2);
        let e0 = dvector![start.0 - target.0, start.1 - target.1, 0.0, 0.0];
        let (oracle_cost, gains) = lqr_cost(
            &model.transition,
            &model.input,
            &prob.objectives[0].w_terminal,
            &prob.objectives[0].w_input,
            &e0,
            horizon,
        );

        // Task cost of the solved trajectory (strip the constant barrier).
        let mut task_cost = 0.0;
        for t in 0..horizon {
            let u = outcome.inputs[0].row(t).transpose();
            task_cost += (u.transpose() * &prob.objectives[0].w_input * u)[(0, 0)];
        }
        let err = &outcome.beliefs[0][horizon].mean - &prob.objectives[0].x_desired;
        let terminal_cost = (err.transpose() * &prob.objectives[0].w_terminal * &err)[(0, 0)];
        task_cost += terminal_cost;
        assert_relative_eq!(task_cost, oracle_cost, max_relative = 1e-4);

        // The oracle's closed-loop terminal state cost for comparison.
        let mut e = e0.clone();
        for t in 0..horizon {
            let u = -&gains[t] * &e;
            e = &model.transition * &e + &model.input * &u;
        }
        let oracle_terminal =
            (e.transpose() * &prob.objectives[0].w_terminal * &e)[(0, 0)];
        assert!((terminal_cost - oracle_terminal).abs() <= 1e-4 * oracle_terminal.max(1e-4));
    }

    #[test]
    fn zero_budget_returns_the_initial_plan_unchanged() {
        let prob = problem(2, &[(3.0, 0.0), (5.0, 0.0)]);
        let plan = hover_plan(&prob, &[(0.0, 0.0), (5.0, 0.0)], 10);
        let aug = AugmentedCostTerms::inactive(&[2], 10);
        let outcome = ilqg_solve(&prob, &plan, &[0], &aug, 0, None).unwrap();
        assert!(!outcome.improved);
        assert_eq!(outcome.iterations_used, 0);
        assert_eq!(outcome.inputs[0], plan.inputs[0]);
        assert_relative_eq!(outcome.cost, outcome.initial_cost);
    }

    #[test]
    fn infeasible_initial_trajectory_is_rejected_up_front() {
        // 50 m apart: past the communication range entirely, bound is zero.
        let prob = problem(2, &[(0.0, 0.0), (50.0, 0.0)]);
        let plan = hover_plan(&prob, &[(0.0, 0.0), (50.0, 0.0)], 5);
        let aug = AugmentedCostTerms::inactive(&[2], 5);
        match ilqg_solve(&prob, &plan, &[0], &aug, 3, None) {
            Err(Error::BarrierViolation { .. }) => {}
            other => panic!("expected a barrier violation, got {other:?}"),
        }
    }

    #[test]
    fn accepted_iterates_stay_feasible_when_the_task_pulls_apart() {
        // Targets drag the robots toward the range limit; the acceptance
        // rule must refuse any candidate whose bound touches the floor.
        let horizon = 20;
        let prob = problem(2, &[(-6.0, 0.0), (34.0, 0.0)]);
        let plan = hover_plan(&prob, &[(0.0, 0.0), (28.0, 0.0)], horizon);
        let aug = AugmentedCostTerms::inactive(&[2, 2], horizon);
        let outcome = ilqg_solve(&prob, &plan, &[0, 1], &aug, 6, None).unwrap();
        assert!(outcome.cost <= outcome.initial_cost);
        // Re-propagate and re-check every timestep of the returned plan.
        let mut full = plan.clone();
        for (v, &r) in [0usize, 1].iter().enumerate() {
            full.replace_inputs(&prob, r, outcome.inputs[v].clone()).unwrap();
        }
        for t in 0..=horizon {
            let eval = prob.engine.evaluate(&full.beliefs_at(t)).unwrap();
            assert!(
                eval.lambda2_lb > prob.engine.config().epsilon,
                "bound dipped to {} at step {t}",
                eval.lambda2_lb
            );
        }
    }

    #[test]
    fn solver_iterations_respect_the_evaluation_budget() {
        // Anisotropic covariances keep the gradient fully analytic, so a
        // solver iteration spends at most one metric evaluation per
        // timestep on the accepted candidate plus the entry sweep.
        let horizon = 25;
        let n = 2;
        let prob = problem(2, &[(2.0, 0.0), (26.0, 0.0)]);
        let initial = vec![
            belief_at(0.0, 0.0, (0.21, 0.08)),
            belief_at(28.0, 0.0, (0.13, 0.29)),
        ];
        let inputs = vec![DMatrix::zeros(horizon, 2); 2];
        let plan = NominalPlan::from_inputs(&prob, &initial, inputs).unwrap();
        let aug = AugmentedCostTerms::inactive(&[2, 2], horizon);

        prob.engine.reset_evaluations();
        let outcome = ilqg_solve(&prob, &plan, &[0, 1], &aug, 3, None).unwrap();
        assert!(outcome.improved);
        for (i, &count) in outcome.iteration_evaluations.iter().enumerate() {
            assert!(
                count <= (2 * horizon + n) as u64,
                "iteration {i} spent {count} evaluations, budget {}",
                2 * horizon + n
            );
        }
    }

    #[test]
    fn cached_entry_evaluations_are_trusted_and_not_recounted() {
        let horizon = 10;
        let prob = problem(2, &[(1.0, 0.0), (5.0, 0.0)]);
        let plan = hover_plan(&prob, &[(0.0, 0.0), (5.0, 0.0)], horizon);
        let evals: Vec<MetricEvaluation> = (0..=horizon)
            .map(|t| prob.engine.evaluate(&plan.beliefs_at(t)).unwrap())
            .collect();
        let aug = AugmentedCostTerms::inactive(&[2], horizon);
        prob.engine.reset_evaluations();
        let outcome = ilqg_solve(&prob, &plan, &[0], &aug, 1, Some(&evals)).unwrap();
        // Only the forward candidates touch the engine: the entry sweep
        // came from the cache and the first timestep is shared.
        let spent = prob.engine.evaluations();
        assert!(outcome.improved);
        assert_eq!(spent as usize, horizon);
    }

    #[test]
    fn transformed_cost_sums_tasks_and_barrier_over_the_horizon() {
        let horizon = 4;
        let prob = problem(2, &[(0.0, 0.0), (5.0, 0.0)]);
        let plan = hover_plan(&prob, &[(0.0, 0.0), (5.0, 0.0)], horizon);
        let evals: Vec<MetricEvaluation> = (0..=horizon)
            .map(|t| prob.engine.evaluate(&plan.beliefs_at(t)).unwrap())
            .collect();
        let total = transformed_cost(&prob, &plan, &evals).unwrap();
        let mut expected = 0.0;
        for eval in &evals {
            expected += connectivity_cost(eval.lambda2_lb, prob.engine.config()).unwrap();
        }
        // Hovering at the target with zero inputs leaves only the barrier.
        assert_relative_eq!(total, expected, epsilon = 1e-12);
    }

    #[test]
    fn clamp_preserves_direction_and_caps_magnitude() {
        let u = dvector![3.0, 4.0];
        let clamped = clamp_input_norm(&u, 5.0);
        assert_relative_eq!(clamped.norm(), 5.0);
        let shrunk = clamp_input_norm(&dvector![30.0, 40.0], 5.0);
        assert_relative_eq!(shrunk.norm(), 5.0);
        assert_relative_eq!(shrunk[0] / shrunk[1], 0.75);
        let small = dvector![0.1, 0.2];
        assert_eq!(clamp_input_norm(&small, 5.0), small);
    }
}
