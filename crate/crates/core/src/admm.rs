//! Distributed consensus planner over the whole team's trajectories.
//!
//! Every robot repeatedly optimizes a small rotating subset of the team's
//! input sequences against the shared consensus trajectory, broadcasts the
//! optimized rows, averages what it received, and moves the consensus
//! toward that average only as far as the connectivity bound allows. A dual
//! variable accumulates, for the rows a robot optimized, the gap between
//! its solution and the consensus, which is what ties the subset solves
//! together over time.
//!
//! The consensus trajectory is feasible at every iteration by construction:
//! it starts from a feasible guess and the line search refuses any step
//! that would drag the connectivity lower bound to its floor. Whatever the
//! stopping rule, the planner's output is the last consensus, so the output
//! inherits that guarantee.
//!
//! Communication is simulated: the exchange is an in-process barrier and
//! each iteration charges a fixed delay to a simulated clock. The averaging
//! and line-search steps are replicated identically on every robot rather
//! than delegated to a coordinator, so the loop has no single point of
//! failure to model.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ilqg::{ilqg_solve, transformed_cost, AugmentedCostTerms, NominalPlan, TeamProblem};
use crate::metric::MetricEvaluation;

/// Smallest consensus step factor the line search will try before leaving
/// the consensus where it is.
pub const BETA_FLOOR: f64 = 1e-6;

/// Tunables of the consensus loop.
#[derive(Debug, Clone)]
pub struct AdmmParams {
    /// Penalty weight on the local-versus-consensus deviation.
    pub rho: f64,
    /// Subset size: how many trajectories each robot optimizes per iteration.
    pub eta: usize,
    /// Shrink factor for the consensus line search, in (0, 1).
    pub gamma: f64,
    /// Inner optimizer iterations per subset solve.
    pub ilqg_iterations: usize,
}

impl Default for AdmmParams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            eta: 2,
            gamma: 0.8,
            ilqg_iterations: 3,
        }
    }
}

impl AdmmParams {
    pub fn validate(&self, n_robots: usize) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!(
                "consensus penalty weight must be positive, got {}",
                self.rho
            )));
        }
        if self.eta < 1 || self.eta > n_robots {
            return Err(Error::Config(format!(
                "subset size {} must lie in 1..={n_robots}",
                self.eta
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "line-search shrink factor must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if self.ilqg_iterations == 0 {
            return Err(Error::Config(
                "each subset solve needs at least one optimizer iteration".into(),
            ));
        }
        Ok(())
    }
}

/// When the consensus loop stops.
#[derive(Debug, Clone)]
pub enum StopRule {
    /// Offline profile: stop once the transformed cost has settled for a
    /// stretch of iterations and the local solutions agree with the
    /// consensus, or at the iteration cap. The simulated clock advances by
    /// the communication delay only, so runs are reproducible byte for byte.
    Converged {
        /// Relative transformed-cost change below which an iteration counts
        /// as settled.
        rel_tol: f64,
        /// Consecutive settled iterations required.
        window: usize,
        /// Max-norm threshold on the local-versus-consensus input residual.
        residual_tol: f64,
        /// Hard cap on iterations.
        max_iterations: usize,
        /// Simulated per-iteration communication delay, seconds.
        comm_delay_s: f64,
    },
    /// Online profile: stop before the simulated clock would overrun the
    /// budget. The clock advances by measured wall time plus the
    /// communication delay, and the loop keeps a two-times-slowest-iteration
    /// margin so the final reading stays inside the budget.
    Time {
        budget_s: f64,
        /// Simulated per-iteration communication delay, seconds.
        comm_delay_s: f64,
    },
}

impl StopRule {
    /// Convergence-based stopping with the documented thresholds.
    pub fn converged(max_iterations: usize) -> Self {
        StopRule::Converged {
            rel_tol: 1e-4,
            window: 5,
            residual_tol: 1e-3,
            max_iterations,
            comm_delay_s: 0.2,
        }
    }

    /// Time-based stopping with the documented communication delay.
    pub fn timed(budget_s: f64) -> Self {
        StopRule::Time {
            budget_s,
            comm_delay_s: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StopRule::Converged {
                rel_tol,
                window,
                residual_tol,
                comm_delay_s,
                ..
            } => {
                if !(*rel_tol > 0.0) || !(*residual_tol > 0.0) {
                    return Err(Error::Config(
                        "convergence tolerances must be positive".into(),
                    ));
                }
                if *window == 0 {
                    return Err(Error::Config(
                        "convergence window must span at least one iteration".into(),
                    ));
                }
                if !(*comm_delay_s >= 0.0) {
                    return Err(Error::Config(
                        "communication delay must be non-negative".into(),
                    ));
                }
                Ok(())
            }
            StopRule::Time {
                budget_s,
                comm_delay_s,
            } => {
                if !(*budget_s > 0.0) {
                    return Err(Error::Config(format!(
                        "time budget must be positive, got {budget_s}"
                    )));
                }
                if !(*comm_delay_s >= 0.0) {
                    return Err(Error::Config(
                        "communication delay must be non-negative".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    fn comm_delay_s(&self) -> f64 {
        match self {
            StopRule::Converged { comm_delay_s, .. } => *comm_delay_s,
            StopRule::Time { comm_delay_s, .. } => *comm_delay_s,
        }
    }
}

/// Per-robot planner state across consensus iterations. The parameters
/// shared by the whole team live in [`AdmmParams`]; this holds only what
/// differs per robot.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub robot_id: usize,
    /// Next iteration to run, counted from 1.
    pub iteration: usize,
    /// This robot's latest local solution: one input matrix per robot,
    /// equal to the consensus outside the subsets it has optimized.
    pub local: Vec<DMatrix<f64>>,
    /// Dual rows, same shapes as `local`, zero before the first iteration.
    pub dual: Vec<DMatrix<f64>>,
}

impl AdmmState {
    /// Fresh state at the start of a run: local solution equal to the
    /// initial consensus, dual at zero.
    pub fn initial(robot_id: usize, consensus: &[DMatrix<f64>]) -> Self {
        Self {
            robot_id,
            iteration: 1,
            local: consensus.to_vec(),
            dual: consensus
                .iter()
                .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
                .collect(),
        }
    }
}

/// What one robot broadcasts after its optimization step: which
/// trajectories it optimized and the new input rows for exactly those.
#[derive(Debug, Clone)]
pub struct ExchangeMessage {
    pub sender: usize,
    /// Iteration the subset was scheduled for, counted from 1.
    pub iteration: usize,
    pub subset: Vec<usize>,
    /// Input rows for the subset robots, in subset order.
    pub inputs: Vec<DMatrix<f64>>,
}

impl ExchangeMessage {
    fn validate(&self, n: usize) -> Result<()> {
        if self.inputs.len() != self.subset.len() {
            return Err(Error::Protocol(format!(
                "message from robot {} carries {} input blocks for a subset of {}",
                self.sender,
                self.inputs.len(),
                self.subset.len()
            )));
        }
        if !self.subset.contains(&self.sender) {
            return Err(Error::Protocol(format!(
                "message from robot {} does not cover its own trajectory",
                self.sender
            )));
        }
        let mut seen = vec![false; n];
        for &j in &self.subset {
            if j >= n {
                return Err(Error::Protocol(format!(
                    "message from robot {} names robot {j} in a team of {n}",
                    self.sender
                )));
            }
            if seen[j] {
                return Err(Error::Protocol(format!(
                    "message from robot {} repeats robot {j}",
                    self.sender
                )));
            }
            seen[j] = true;
        }
        Ok(())
    }
}

/// The trajectory subset robot `robot` optimizes at iteration `k` (counted
/// from 1): itself plus a window of `eta - 1` consecutive others taken from
/// the cyclic sequence of the remaining indices, with the window start
/// advancing by one each iteration. Over any `n - 1` consecutive iterations
/// every trajectory is optimized by exactly `eta` robots per iteration,
/// which is what the averaging step divides by.
pub fn select_subset(robot: usize, k: usize, n: usize, eta: usize) -> Result<Vec<usize>> {
    if robot >= n {
        return Err(Error::Config(format!(
            "robot {robot} out of range for a team of {n}"
        )));
    }
    if eta < 1 || eta > n {
        return Err(Error::Config(format!("subset size {eta} must lie in 1..={n}")));
    }
    if k == 0 {
        return Err(Error::Config("iterations are counted from 1".into()));
    }
    let mut subset = Vec::with_capacity(eta);
    subset.push(robot);
    if eta > 1 {
        let others: Vec<usize> = (1..n).map(|m| (robot + m) % n).collect();
        let offset = (k - 1) % (n - 1);
        for m in 0..(eta - 1) {
            subset.push(others[(offset + m) % (n - 1)]);
        }
    }
    Ok(subset)
}

/// Averages the optimized rows for every robot across one iteration's
/// messages. The scheduler guarantees each trajectory was optimized by
/// exactly `eta` senders; anything else is a broken exchange.
pub fn admm_average(
    messages: &[ExchangeMessage],
    n: usize,
    eta: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let mut sums: Vec<Option<DMatrix<f64>>> = vec![None; n];
    let mut counts = vec![0usize; n];
    for msg in messages {
        msg.validate(n)?;
        for (v, &j) in msg.subset.iter().enumerate() {
            counts[j] += 1;
            match &mut sums[j] {
                Some(sum) => {
                    if sum.shape() != msg.inputs[v].shape() {
                        return Err(Error::Protocol(format!(
                            "robot {j} input blocks disagree on shape across senders"
                        )));
                    }
                    *sum += &msg.inputs[v];
                }
                None => sums[j] = Some(msg.inputs[v].clone()),
            }
        }
    }
    let mut averaged = Vec::with_capacity(n);
    for (j, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
        if count != eta {
            return Err(Error::Protocol(format!(
                "robot {j} was optimized by {count} senders, expected {eta}"
            )));
        }
        averaged.push(sum.expect("count matched eta > 0") / eta as f64);
    }
    Ok(averaged)
}

/// Moves the consensus toward `target` as far as feasibility allows:
/// candidates `prev + beta * (target - prev)` are tried with `beta` shrunk
/// by `gamma` from 1 until `feasible` accepts one. The callback returns a
/// payload for an acceptable candidate and `None` for an infeasible one.
/// Below the floor on `beta` the previous consensus is kept (it is feasible
/// by the loop invariant) and the step factor reported as zero.
pub fn consensus_line_search<T>(
    prev: &[DMatrix<f64>],
    target: &[DMatrix<f64>],
    gamma: f64,
    mut feasible: impl FnMut(&[DMatrix<f64>]) -> Result<Option<T>>,
) -> Result<(Vec<DMatrix<f64>>, f64, Option<T>)> {
    if prev.len() != target.len() {
        return Err(Error::Config(format!(
            "line search got {} previous blocks and {} targets",
            prev.len(),
            target.len()
        )));
    }
    for (p, t) in prev.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(Error::Config(
                "line-search blocks must share shapes".into(),
            ));
        }
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!(
            "line-search shrink factor must lie in (0, 1), got {gamma}"
        )));
    }
    let mut beta = 1.0;
    while beta >= BETA_FLOOR {
        let candidate: Vec<DMatrix<f64>> = prev
            .iter()
            .zip(target)
            .map(|(p, t)| p + (t - p) * beta)
            .collect();
        if let Some(payload) = feasible(&candidate)? {
            return Ok((candidate, beta, Some(payload)));
        }
        beta *= gamma;
    }
    Ok((prev.to_vec(), 0.0, None))
}

/// Dual ascent step: each block accumulates `rho` times the gap between the
/// local solution and the consensus. The planner applies this to the blocks
/// a robot optimized in the current iteration; a trajectory the robot left
/// untouched carries no new disagreement, so its dual block is not passed
/// here and keeps its value.
pub fn dual_update(
    dual: &mut [DMatrix<f64>],
    local: &[DMatrix<f64>],
    consensus: &[DMatrix<f64>],
    rho: f64,
) -> Result<()> {
    if dual.len() != local.len() || dual.len() != consensus.len() {
        return Err(Error::Config(format!(
            "dual update got {} dual, {} local, {} consensus blocks",
            dual.len(),
            local.len(),
            consensus.len()
        )));
    }
    for ((y, u), ub) in dual.iter_mut().zip(local).zip(consensus) {
        if y.shape() != u.shape() || y.shape() != ub.shape() {
            return Err(Error::Config(
                "dual update blocks must share shapes".into(),
            ));
        }
        *y += (u - ub) * rho;
    }
    Ok(())
}

/// One row of the planner trace, recorded after each consensus iteration.
#[derive(Debug, Clone)]
pub struct PlannerIteration {
    /// Iteration number, counted from 1.
    pub iteration: usize,
    /// Transformed team cost of the consensus after this iteration.
    pub transformed_cost: f64,
    /// Accepted line-search step factor; zero when the consensus was kept.
    pub beta: f64,
    /// Smallest connectivity lower bound over the consensus trajectory
    /// after this iteration.
    pub min_bound: f64,
    /// Simulated clock after this iteration, seconds.
    pub clock_s: f64,
}

/// Result of a planning run: the final consensus plan, its transformed
/// cost, and the per-iteration trace.
#[derive(Debug, Clone)]
pub struct ConsensusOutcome {
    pub plan: NominalPlan,
    pub transformed_cost: f64,
    pub trace: Vec<PlannerIteration>,
}

impl ConsensusOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// Simulated clock at the end of the run, seconds.
    pub fn clock_s(&self) -> f64 {
        self.trace.last().map_or(0.0, |row| row.clock_s)
    }
}

/// Runs the consensus loop from a feasible initial plan.
///
/// Each iteration runs every robot's subset solve (in parallel, with no
/// shared mutable state), exchanges the optimized rows, averages them,
/// line-searches the consensus update under the full-system feasibility
/// check, and updates the duals. The subset solves all start from the same
/// consensus trajectory, so its metric evaluations are computed once and
/// shared. Results are identical for any worker count: the parallel phase
/// writes into slots ordered by robot index and everything downstream is
/// sequential.
pub fn plan(
    problem: &TeamProblem,
    initial: &NominalPlan,
    params: &AdmmParams,
    stop: &StopRule,
) -> Result<ConsensusOutcome> {
    problem.validate()?;
    params.validate(problem.n_robots())?;
    stop.validate()?;
    initial.validate(problem)?;
    let n = problem.n_robots();
    let horizon = initial.horizon();
    if horizon == 0 {
        return Err(Error::Config("cannot plan over a zero-step horizon".into()));
    }
    let epsilon = problem.engine.config().epsilon;
    let comm_delay_s = stop.comm_delay_s();

    let mut consensus = initial.clone();
    let mut evals: Vec<MetricEvaluation> = (0..=horizon)
        .map(|t| problem.engine.evaluate(&consensus.beliefs_at(t)))
        .collect::<Result<_>>()?;
    for eval in &evals {
        if eval.lambda2_lb <= epsilon {
            return Err(Error::Infeasible(format!(
                "initial guess reaches connectivity bound {} at floor {epsilon}",
                eval.lambda2_lb
            )));
        }
    }
    let mut cost = transformed_cost(problem, &consensus, &evals)?;

    let initial_beliefs = consensus.beliefs_at(0);
    let mut states: Vec<AdmmState> = (0..n)
        .map(|i| AdmmState::initial(i, &consensus.inputs))
        .collect();

    let mut trace: Vec<PlannerIteration> = Vec::new();
    let mut clock_s = 0.0;
    let mut slowest_iteration_s = 0.0_f64;
    let mut settled_streak = 0usize;
    let mut last_residual = f64::INFINITY;

    loop {
        let k = trace.len() + 1;
        match stop {
            StopRule::Converged {
                rel_tol: _,
                window,
                residual_tol,
                max_iterations,
                ..
            } => {
                if trace.len() >= *max_iterations {
                    break;
                }
                if settled_streak >= *window && last_residual < *residual_tol {
                    break;
                }
            }
            StopRule::Time { budget_s, .. } => {
                if clock_s + comm_delay_s + 2.0 * slowest_iteration_s > *budget_s {
                    break;
                }
            }
        }

        let iteration_start = Instant::now();

        // Optimization step, one subset solve per robot. Everything each
        // solve needs is borrowed immutably, so the phase parallelizes
        // without coordination; collect keeps robot order.
        let evals_ref = &evals;
        let consensus_ref = &consensus;
        let states_ref = &states;
        let messages: Vec<ExchangeMessage> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<ExchangeMessage> {
                let subset = select_subset(i, k, n, params.eta)?;
                let dual_rows: Vec<DMatrix<f64>> = subset
                    .iter()
                    .map(|&j| states_ref[i].dual[j].clone())
                    .collect();
                let consensus_rows: Vec<DMatrix<f64>> = subset
                    .iter()
                    .map(|&j| consensus_ref.inputs[j].clone())
                    .collect();
                let aug = AugmentedCostTerms::new(dual_rows, consensus_rows, params.rho)?;
                let outcome = ilqg_solve(
                    problem,
                    consensus_ref,
                    &subset,
                    &aug,
                    params.ilqg_iterations,
                    Some(evals_ref),
                )?;
                Ok(ExchangeMessage {
                    sender: i,
                    iteration: k,
                    subset,
                    inputs: outcome.inputs,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        // Each robot's full local solution: the consensus it started from
        // with its own optimized rows substituted.
        for (state, msg) in states.iter_mut().zip(&messages) {
            state.local = consensus.inputs.clone();
            for (v, &j) in msg.subset.iter().enumerate() {
                state.local[j] = msg.inputs[v].clone();
            }
        }

        // Averaging and consensus update are replicated on every robot with
        // identical inputs; computing them once stands in for all copies.
        let averaged = admm_average(&messages, n, params.eta)?;
        let (new_inputs, beta, payload) =
            consensus_line_search(&consensus.inputs, &averaged, params.gamma, |candidate| {
                let plan =
                    NominalPlan::from_inputs(problem, &initial_beliefs, candidate.to_vec())?;
                let mut candidate_evals = Vec::with_capacity(horizon + 1);
                // The initial beliefs never move, so the entry evaluation
                // carries over to every candidate.
                candidate_evals.push(evals[0].clone());
                for t in 1..=horizon {
                    let eval = problem.engine.evaluate(&plan.beliefs_at(t))?;
                    if eval.lambda2_lb <= epsilon {
                        return Ok(None);
                    }
                    candidate_evals.push(eval);
                }
                Ok(Some((plan, candidate_evals)))
            })?;
        if let Some((new_plan, new_evals)) = payload {
            consensus = new_plan;
            evals = new_evals;
        } else {
            debug_assert_eq!(beta, 0.0);
        }
        drop(new_inputs);

        // Dual ascent over the rows each robot optimized this iteration.
        // A row outside the subset still holds the previous consensus, so
        // its apparent residual is just however far the consensus moved;
        // folding that into the dual would push the row to keep moving the
        // same way the next time it is optimized.
        for (state, msg) in states.iter_mut().zip(&messages) {
            let mut dual_rows: Vec<DMatrix<f64>> = msg
                .subset
                .iter()
                .map(|&j| state.dual[j].clone())
                .collect();
            let consensus_rows: Vec<DMatrix<f64>> = msg
                .subset
                .iter()
                .map(|&j| consensus.inputs[j].clone())
                .collect();
            dual_update(&mut dual_rows, &msg.inputs, &consensus_rows, params.rho)?;
            for (v, &j) in msg.subset.iter().enumerate() {
                state.dual[j] = dual_rows[v].clone();
            }
            state.iteration = k + 1;
        }

        last_residual = states
            .iter()
            .flat_map(|state| {
                state
                    .local
                    .iter()
                    .zip(&consensus.inputs)
                    .map(|(local, cons)| (local - cons).amax())
            })
            .fold(0.0, f64::max);

        let new_cost = transformed_cost(problem, &consensus, &evals)?;
        let rel_change = (new_cost - cost).abs() / cost.abs().max(1e-12);
        cost = new_cost;
        if let StopRule::Converged { rel_tol, .. } = stop {
            if rel_change < *rel_tol {
                settled_streak += 1;
            } else {
                settled_streak = 0;
            }
        }

        let wall_s = iteration_start.elapsed().as_secs_f64();
        slowest_iteration_s = slowest_iteration_s.max(wall_s);
        clock_s += match stop {
            // Wall time is excluded from the converged-mode clock so that
            // identical runs report identical clocks.
            StopRule::Converged { .. } => comm_delay_s,
            StopRule::Time { .. } => wall_s + comm_delay_s,
        };
        let min_bound = evals
            .iter()
            .map(|eval| eval.lambda2_lb)
            .fold(f64::INFINITY, f64::min);
        trace.push(PlannerIteration {
            iteration: k,
            transformed_cost: cost,
            beta,
            min_bound,
            clock_s,
        });
    }

    Ok(ConsensusOutcome {
        plan: consensus,
        transformed_cost: cost,
        trace,
    })
}
