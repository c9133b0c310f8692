//! A probabilistic lower bound on team connectivity, computed from beliefs
//! instead of true states, with the barrier cost and derivatives the planner
//! needs.
//!
//! The construction: each robot's position estimate carries a confidence
//! ellipse; overbounding it by a circle of radius `s * sqrt(largest position
//! covariance eigenvalue)` and adding both robots' radii to the mean
//! separation gives a pessimistic pairwise distance. Feeding those distances
//! through the smooth edge taper yields a graph whose algebraic connectivity
//! lower-bounds the true (binary-graph) connectivity with probability at
//! least the configured team confidence. The planner then keeps that lower
//! bound away from a floor `epsilon` with the barrier cost `k / (lambda -
//! epsilon)`.
//!
//! Because the bound sits inside the innermost loop of every optimization
//! and every Monte Carlo validation, evaluations are counted: the rank-one
//! curvature path exists precisely to spend one evaluation where a
//! finite-difference Hessian would spend thousands, and tests hold the crate
//! to that.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

use crate::belief::{lower_triangle_index, Belief, BeliefVector};
use crate::error::{Error, Result};
use crate::spectral::{
    algebraic_connectivity, check_band, smooth_edge_weight, symmetric_eigendecomposition,
};

/// Gap below which a robot's largest position-covariance eigenvalue is
/// treated as repeated; its eigenvector is then an arbitrary basis choice
/// and analytic covariance gradients through it are flagged.
const COV_EIG_GAP_TOL: f64 = 1e-9;

/// Mean separations under this on an edge with nonzero weight slope make
/// the distance direction singular.
const COINCIDENT_MEAN_TOL: f64 = 1e-9;

/// Central-difference step for the finite-difference fallbacks and oracles.
pub const GRADIENT_FD_STEP: f64 = 1e-6;

/// Connectivity-maintenance parameters for one team.
#[derive(Debug, Clone)]
pub struct ConnectivityConfig {
    /// Hard communication range (meters).
    pub delta: f64,
    /// Distance where the smooth weight starts tapering (meters).
    pub delta0: f64,
    /// Barrier floor on the connectivity lower bound.
    pub epsilon: f64,
    /// Team-level probability target in (0,1) for the lower bound holding.
    pub confidence: f64,
    /// Barrier cost magnitude.
    pub barrier_gain: f64,
    /// Team size.
    pub n_robots: usize,
    /// Dimension of each robot's position block.
    pub position_dim: usize,
}

impl ConnectivityConfig {
    pub fn validate(&self) -> Result<()> {
        check_band(self.delta0, self.delta)?;
        if self.n_robots < 2 {
            return Err(Error::Config(format!(
                "connectivity needs at least two robots, got {}",
                self.n_robots
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < self.n_robots as f64) {
            return Err(Error::Config(format!(
                "barrier floor must satisfy 0 < epsilon < {}, got {}",
                self.n_robots, self.epsilon
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!(
                "confidence must lie in (0,1), got {}",
                self.confidence
            )));
        }
        if !(self.barrier_gain > 0.0) {
            return Err(Error::Config(format!(
                "barrier gain must be positive, got {}",
                self.barrier_gain
            )));
        }
        if self.position_dim == 0 {
            return Err(Error::Config("position dimension must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-robot share of the ellipse-escape probability: `1 - confidence^(1/N)`.
pub fn delta_ellipse(confidence: f64, n_robots: usize) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Domain(format!(
            "confidence must lie in (0,1), got {confidence}"
        )));
    }
    if n_robots == 0 {
        return Err(Error::Domain("robot count must be at least 1".into()));
    }
    Ok(1.0 - confidence.powf(1.0 / n_robots as f64))
}

/// Confidence-region radius multiplier: `sqrt` of the `(1 - delta_e)`
/// quantile of the chi-square distribution with `position_dim` degrees of
/// freedom. For two dimensions the closed form `sqrt(-2 ln delta_e)` is
/// exact; other dimensions go through the chi-square quantile numerically.
pub fn confidence_scale(delta_e: f64, position_dim: usize) -> Result<f64> {
    if !(delta_e > 0.0 && delta_e < 1.0) {
        return Err(Error::Domain(format!(
            "per-robot escape probability must lie in (0,1), got {delta_e}"
        )));
    }
    if position_dim == 0 {
        return Err(Error::Domain("position dimension must be at least 1".into()));
    }
    if position_dim == 2 {
        return Ok((-2.0 * delta_e.ln()).sqrt());
    }
    Ok(chi_square_quantile(position_dim as f64, 1.0 - delta_e)?.sqrt())
}

/// Chi-square quantile at probability `p`. The library inverse is only good
/// to about 4e-7 relative, so its value seeds a few Newton steps on
/// `cdf(q) - p`, which lands at machine precision.
fn chi_square_quantile(dof: f64, p: f64) -> Result<f64> {
    let chi = ChiSquared::new(dof)
        .map_err(|e| Error::Numerical(format!("chi-square setup failed: {e}")))?;
    let mut q = chi.inverse_cdf(p);
    if !q.is_finite() || q < 0.0 {
        return Err(Error::Numerical(format!(
            "chi-square quantile came back invalid: {q}"
        )));
    }
    for _ in 0..8 {
        let density = chi.pdf(q);
        if !(density > 0.0) {
            break;
        }
        let step = (chi.cdf(q) - p) / density;
        q -= step;
        if !q.is_finite() || q < 0.0 {
            return Err(Error::Numerical(format!(
                "chi-square quantile refinement diverged at dof {dof}, p {p}"
            )));
        }
        if step.abs() <= 1e-14 * q.max(1.0) {
            break;
        }
    }
    Ok(q)
}

/// Largest eigenvalue of a position covariance block with its eigenvector
/// and a repeated-eigenvalue flag.
#[derive(Debug, Clone)]
pub struct CovEigenpair {
    pub value: f64,
    pub vector: DVector<f64>,
    /// True when the top eigenvalue is within [`COV_EIG_GAP_TOL`] of the
    /// next one; the vector is then one of many valid choices.
    pub repeated: bool,
}

fn top_position_eigenpair(belief: &Belief, positions: &[usize]) -> Result<CovEigenpair> {
    let rho = positions.len();
    let mut block = DMatrix::zeros(rho, rho);
    for (a, &ia) in positions.iter().enumerate() {
        for (b, &ib) in positions.iter().enumerate() {
            block[(a, b)] = belief.covariance[(ia, ib)];
        }
    }
    let spectrum = symmetric_eigendecomposition(&block)?;
    let top = spectrum.eigenvalues[rho - 1];
    if top < -1e-12 * block.amax().max(1.0) {
        return Err(Error::Numerical(format!(
            "position covariance block is not PSD (top eigenvalue {top:.3e})"
        )));
    }
    let repeated = rho >= 2 && (top - spectrum.eigenvalues[rho - 2]).abs() < COV_EIG_GAP_TOL;
    Ok(CovEigenpair {
        value: top.max(0.0),
        vector: spectrum.eigenvectors.column(rho - 1).into_owned(),
        repeated,
    })
}

fn position_mean(belief: &Belief, positions: &[usize]) -> DVector<f64> {
    DVector::from_iterator(positions.len(), positions.iter().map(|&i| belief.mean[i]))
}

/// Pessimistic pairwise distance: mean separation plus both robots'
/// confidence-circle radii.
pub fn distance_measure(
    belief_i: &Belief,
    belief_j: &Belief,
    scale: f64,
    positions: &[usize],
) -> Result<f64> {
    if scale < 0.0 || !scale.is_finite() {
        return Err(Error::Domain(format!(
            "confidence scale must be finite and non-negative, got {scale}"
        )));
    }
    let pi = position_mean(belief_i, positions);
    let pj = position_mean(belief_j, positions);
    let eig_i = top_position_eigenpair(belief_i, positions)?;
    let eig_j = top_position_eigenpair(belief_j, positions)?;
    Ok((pi - pj).norm() + scale * eig_i.value.sqrt() + scale * eig_j.value.sqrt())
}

/// One evaluation of the connectivity lower bound, with everything the
/// gradient needs cached.
#[derive(Debug, Clone)]
pub struct MetricEvaluation {
    /// The probabilistic lower bound on algebraic connectivity.
    pub lambda2_lb: f64,
    /// Eigenvector paired with the bound.
    pub fiedler: DVector<f64>,
    /// Smooth edge weights (symmetric, zero diagonal).
    pub edge_weights: DMatrix<f64>,
    /// Pessimistic pairwise distances (symmetric, zero diagonal).
    pub distance_measures: DMatrix<f64>,
    /// Mean separations (symmetric, zero diagonal).
    pub mean_distances: DMatrix<f64>,
    /// Per-robot top position-covariance eigenpairs.
    pub cov_eigenpairs: Vec<CovEigenpair>,
    /// True when the bound's eigenvalue is repeated, making its gradient
    /// undefined.
    pub lambda2_repeated: bool,
    /// Confidence-circle radius multiplier used.
    pub scale: f64,
}

/// Evaluates the connectivity lower bound and its derivatives for one team,
/// counting every evaluation so economy claims stay testable.
#[derive(Debug)]
pub struct MetricEngine {
    config: ConnectivityConfig,
    position_indices: Vec<usize>,
    scale: f64,
    evaluations: AtomicU64,
}

impl MetricEngine {
    pub fn new(config: ConnectivityConfig, position_indices: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if position_indices.len() != config.position_dim {
            return Err(Error::Config(format!(
                "{} position indices given for position dimension {}",
                position_indices.len(),
                config.position_dim
            )));
        }
        if position_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "position indices must be strictly ascending".into(),
            ));
        }
        let delta_e = delta_ellipse(config.confidence, config.n_robots)?;
        let scale = confidence_scale(delta_e, config.position_dim)?;
        Ok(Self {
            config,
            position_indices,
            scale,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ConnectivityConfig {
        &self.config
    }

    pub fn position_indices(&self) -> &[usize] {
        &self.position_indices
    }

    /// Confidence-circle radius multiplier (fixed by the config).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Number of metric evaluations since construction or the last reset.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    /// Computes the connectivity lower bound for the team's current beliefs.
    pub fn evaluate(&self, beliefs: &[Belief]) -> Result<MetricEvaluation> {
        let n = beliefs.len();
        if n != self.config.n_robots {
            return Err(Error::Domain(format!(
                "{} beliefs given for a {}-robot configuration",
                n, self.config.n_robots
            )));
        }
        let max_pos = *self.position_indices.last().expect("validated non-empty");
        for (i, b) in beliefs.iter().enumerate() {
            if b.dim() <= max_pos {
                return Err(Error::Domain(format!(
                    "robot {i} state dimension {} is too small for position index {max_pos}",
                    b.dim()
                )));
            }
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);

        let mut cov_eigenpairs = Vec::with_capacity(n);
        let mut means = Vec::with_capacity(n);
        for b in beliefs {
            cov_eigenpairs.push(top_position_eigenpair(b, &self.position_indices)?);
            means.push(position_mean(b, &self.position_indices));
        }
        let radii: Vec<f64> = cov_eigenpairs
            .iter()
            .map(|e| self.scale * e.value.sqrt())
            .collect();

        let mut mean_distances = DMatrix::zeros(n, n);
        let mut distance_measures = DMatrix::zeros(n, n);
        let mut edge_weights = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = (&means[i] - &means[j]).norm();
                let l = d + radii[i] + radii[j];
                let w = smooth_edge_weight(l, self.config.delta0, self.config.delta)?;
                mean_distances[(i, j)] = d;
                mean_distances[(j, i)] = d;
                distance_measures[(i, j)] = l;
                distance_measures[(j, i)] = l;
                edge_weights[(i, j)] = w;
                edge_weights[(j, i)] = w;
            }
        }

        let spectrum = algebraic_connectivity(&edge_weights)?;
        let mut lambda2_lb = spectrum.lambda2();
        if lambda2_lb < 0.0 {
            // Laplacians are PSD; anything below zero is eigensolver noise.
            debug_assert!(lambda2_lb > -1e-10);
            lambda2_lb = 0.0;
        }
        Ok(MetricEvaluation {
            lambda2_lb,
            fiedler: spectrum.fiedler_vector(),
            edge_weights,
            distance_measures,
            mean_distances,
            cov_eigenpairs,
            lambda2_repeated: spectrum.lambda2_is_repeated(),
            scale: self.scale,
        })
    }

    /// Analytic gradient of the lower bound with respect to every robot's
    /// [`BeliefVector`] coordinates.
    ///
    /// Entries outside the position block (mean and covariance alike) are
    /// zero. Lower-triangle off-diagonal covariance coordinates carry both
    /// symmetric contributions (factor two). Fails when the bound's
    /// eigenvalue is repeated or two means coincide on an edge whose weight
    /// still changes with distance; per-robot repeated covariance
    /// eigenvalues do not fail but are flagged in the evaluation, and
    /// [`Self::gradient_with_fallback`] patches those coordinates.
    pub fn gradient(
        &self,
        eval: &MetricEvaluation,
        beliefs: &[Belief],
    ) -> Result<Vec<DVector<f64>>> {
        let n = beliefs.len();
        if n != self.config.n_robots || eval.fiedler.len() != n {
            return Err(Error::Domain(
                "evaluation and belief list sizes disagree".into(),
            ));
        }
        // With every edge on a flat branch the bound is locally constant in
        // the beliefs, so the gradient is zero regardless of eigenvector
        // ambiguity. Only an active edge makes a repeated eigenvalue a
        // genuine obstruction.
        let has_active = (0..n).any(|i| {
            ((i + 1)..n).any(|j| self.weight_slope(eval.distance_measures[(i, j)]) != 0.0)
        });
        if !has_active {
            return Ok(beliefs
                .iter()
                .map(|b| {
                    let d = b.dim();
                    DVector::zeros(d + d * (d + 1) / 2)
                })
                .collect());
        }
        if eval.lambda2_repeated {
            return Err(Error::GradientUndefined(
                "connectivity eigenvalue is repeated on an active configuration; \
                 its gradient is not defined"
                    .into(),
            ));
        }
        let rho = self.position_indices.len();
        let mut grads = Vec::with_capacity(n);
        for i in 0..n {
            let state_dim = beliefs[i].dim();
            let mut g = DVector::zeros(state_dim + state_dim * (state_dim + 1) / 2);
            let mut cov_factor_sum = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let slope = self.weight_slope(eval.distance_measures[(i, j)]);
                if slope == 0.0 {
                    continue;
                }
                let diff = eval.fiedler[i] - eval.fiedler[j];
                let factor = slope * diff * diff;
                let d = eval.mean_distances[(i, j)];
                if d <= COINCIDENT_MEAN_TOL {
                    return Err(Error::Singularity(format!(
                        "robots {i} and {j} have coincident mean positions on an active edge"
                    )));
                }
                for (m, &sm) in self.position_indices.iter().enumerate() {
                    let unit =
                        (beliefs[i].mean[sm] - beliefs[j].mean[self.position_indices[m]]) / d;
                    g[sm] += factor * unit;
                }
                cov_factor_sum += factor;
            }
            if cov_factor_sum != 0.0 {
                let pair = &eval.cov_eigenpairs[i];
                if pair.value <= 0.0 {
                    return Err(Error::GradientUndefined(format!(
                        "robot {i} has vanishing position covariance on an active edge; \
                         the circle radius is not differentiable at zero"
                    )));
                }
                let radius_slope = self.scale / (2.0 * pair.value.sqrt());
                for m in 0..rho {
                    for b in 0..=m {
                        let sm = self.position_indices[m];
                        let sb = self.position_indices[b];
                        let sym = if m == b { 1.0 } else { 2.0 };
                        let idx = state_dim + lower_triangle_index(sm.max(sb), sm.min(sb));
                        g[idx] = cov_factor_sum * radius_slope * sym * pair.vector[m] * pair.vector[b];
                    }
                }
            }
            grads.push(g);
        }
        Ok(grads)
    }

    /// Gradient with the documented fallbacks: robots whose top covariance
    /// eigenvalue is repeated get their position-block covariance
    /// coordinates replaced by central finite differences (the analytic
    /// eigenvector there is an arbitrary basis choice); if the bound's own
    /// eigenvalue is repeated, every coordinate that can matter is
    /// finite-differenced. Each finite difference consumes two counted
    /// metric evaluations.
    pub fn gradient_with_fallback(
        &self,
        eval: &MetricEvaluation,
        beliefs: &[Belief],
    ) -> Result<Vec<DVector<f64>>> {
        let n = beliefs.len();
        let has_active = (0..n).any(|i| {
            ((i + 1)..n).any(|j| self.weight_slope(eval.distance_measures[(i, j)]) != 0.0)
        });
        if eval.lambda2_repeated && has_active {
            let mut grads = Vec::with_capacity(beliefs.len());
            for robot in 0..beliefs.len() {
                let state_dim = beliefs[robot].dim();
                let mut g = DVector::zeros(state_dim + state_dim * (state_dim + 1) / 2);
                let coords = self.position_coords(state_dim, true);
                let values = self.fd_coords(beliefs, robot, &coords)?;
                for (&c, &v) in coords.iter().zip(values.iter()) {
                    g[c] = v;
                }
                grads.push(g);
            }
            return Ok(grads);
        }
        let mut grads = self.gradient(eval, beliefs)?;
        if !has_active {
            // Every weight slope vanishes, so the zero gradient is exact
            // and no coordinate needs a finite-difference patch.
            return Ok(grads);
        }
        for robot in 0..beliefs.len() {
            if !eval.cov_eigenpairs[robot].repeated {
                continue;
            }
            let state_dim = beliefs[robot].dim();
            let coords = self.position_cov_coords(state_dim);
            let values = self.fd_coords(beliefs, robot, &coords)?;
            for (&c, &v) in coords.iter().zip(values.iter()) {
                grads[robot][c] = v;
            }
        }
        Ok(grads)
    }

    /// BeliefVector coordinates of the position means (and, when
    /// `with_cov`, the position covariance block) for one robot.
    fn position_coords(&self, state_dim: usize, with_cov: bool) -> Vec<usize> {
        let mut coords: Vec<usize> = self.position_indices.clone();
        if with_cov {
            coords.extend(self.position_cov_coords(state_dim));
        }
        coords
    }

    fn position_cov_coords(&self, state_dim: usize) -> Vec<usize> {
        let mut coords = Vec::new();
        for (m, &sm) in self.position_indices.iter().enumerate() {
            for &sb in self.position_indices.iter().take(m + 1) {
                coords.push(state_dim + lower_triangle_index(sm.max(sb), sm.min(sb)));
            }
        }
        coords
    }

    /// Central finite differences of the lower bound along selected
    /// BeliefVector coordinates of one robot.
    pub fn fd_coords(
        &self,
        beliefs: &[Belief],
        robot: usize,
        coords: &[usize],
    ) -> Result<Vec<f64>> {
        let flat = BeliefVector::from_belief(&beliefs[robot]);
        let mut values = Vec::with_capacity(coords.len());
        let mut work: Vec<Belief> = beliefs.to_vec();
        for &coord in coords {
            let mut sided = [0.0; 2];
            for (side, sign) in [(0usize, 1.0), (1usize, -1.0)] {
                work[robot] = flat.perturbed(coord, sign * GRADIENT_FD_STEP).to_belief()?;
                sided[side] = self.evaluate(&work)?.lambda2_lb;
            }
            values.push((sided[0] - sided[1]) / (2.0 * GRADIENT_FD_STEP));
            work[robot] = beliefs[robot].clone();
        }
        Ok(values)
    }

    /// Derivative of the smooth edge weight with respect to the distance
    /// measure; zero on the flat and disconnected branches and at both band
    /// edges.
    fn weight_slope(&self, measure: f64) -> f64 {
        let (d0, d1) = (self.config.delta0, self.config.delta);
        if measure <= d0 || measure >= d1 {
            return 0.0;
        }
        let band = d1 - d0;
        -(std::f64::consts::PI / (2.0 * band))
            * (std::f64::consts::PI * (measure - d0) / band).sin()
    }
}

/// Barrier cost `k / (lambda - epsilon)`; grows without bound as the lower
/// bound approaches the floor.
pub fn connectivity_cost(lambda2_lb: f64, cfg: &ConnectivityConfig) -> Result<f64> {
    let gap = lambda2_lb - cfg.epsilon;
    if gap <= 0.0 {
        return Err(Error::BarrierViolation {
            lambda2_lb,
            epsilon: cfg.epsilon,
        });
    }
    Ok(cfg.barrier_gain / gap)
}

/// Barrier cost expanded to second order in the connectivity bound and
/// first order in the beliefs: quadratic term `curvature * a * a^T`, linear
/// term `slope * a`, constant `value`, with `a` the stacked metric gradient.
#[derive(Debug, Clone)]
pub struct BarrierQuadratic {
    /// Barrier cost at the evaluation point.
    pub value: f64,
    /// First derivative of the barrier in the bound (negative).
    pub slope: f64,
    /// Second derivative of the barrier in the bound (positive, so the
    /// rank-one quadratic term is PSD by construction).
    pub curvature: f64,
    /// Stacked gradient direction of the bound in belief coordinates.
    pub direction: DVector<f64>,
}

/// Rank-one curvature model of the barrier cost around an evaluation.
///
/// Consumes no further metric evaluations beyond the one that produced
/// `eval`: the whole point of the factorization is that a full Hessian in
/// belief coordinates would cost on the order of (stacked dimension)^2
/// evaluations per timestep, where this costs none.
pub fn rank1_hessian(
    eval: &MetricEvaluation,
    direction: DVector<f64>,
    cfg: &ConnectivityConfig,
) -> Result<BarrierQuadratic> {
    let gap = eval.lambda2_lb - cfg.epsilon;
    if gap <= 0.0 {
        return Err(Error::BarrierViolation {
            lambda2_lb: eval.lambda2_lb,
            epsilon: cfg.epsilon,
        });
    }
    Ok(BarrierQuadratic {
        value: cfg.barrier_gain / gap,
        slope: -cfg.barrier_gain / (gap * gap),
        curvature: 2.0 * cfg.barrier_gain / (gap * gap * gap),
        direction,
    })
}

/// Central-difference Hessian (with gradient and value) of the barrier cost
/// over the stacked BeliefVector coordinates of `subset`. This is the
/// measuring stick the rank-one path is compared against: it consumes
/// `2 d^2 + 1` metric evaluations for stacked dimension `d`, every one of
/// them counted by the engine.
pub fn numerical_barrier_hessian(
    engine: &MetricEngine,
    beliefs: &[Belief],
    subset: &[usize],
    step: f64,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let dims: Vec<usize> = subset
        .iter()
        .map(|&r| {
            let n = beliefs[r].dim();
            n + n * (n + 1) / 2
        })
        .collect();
    let total: usize = dims.iter().sum();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0usize, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();

    let cost_at = |work: &[Belief]| -> Result<f64> {
        connectivity_cost(engine.evaluate(work)?.lambda2_lb, engine.config())
    };
    let perturb = |work: &mut Vec<Belief>, flat_index: usize, h: f64| -> Result<()> {
        let (which, coord) = locate(flat_index, &offsets, &dims);
        let robot = subset[which];
        let flat = BeliefVector::from_belief(&work[robot]);
        work[robot] = flat.perturbed(coord, h).to_belief()?;
        Ok(())
    };

    let base = cost_at(beliefs)?;
    let mut gradient = DVector::zeros(total);
    let mut hessian = DMatrix::zeros(total, total);
    let mut work: Vec<Belief> = beliefs.to_vec();

    for a in 0..total {
        let mut values = [0.0; 2];
        for (slot, sign) in [(0usize, 1.0), (1usize, -1.0)] {
            work.clone_from_slice(beliefs);
            perturb(&mut work, a, sign * step)?;
            values[slot] = cost_at(&work)?;
        }
        gradient[a] = (values[0] - values[1]) / (2.0 * step);
        hessian[(a, a)] = (values[0] - 2.0 * base + values[1]) / (step * step);
    }
    for a in 0..total {
        for b in (a + 1)..total {
            let mut quad = [0.0; 4];
            for (slot, (sa, sb)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                .iter()
                .enumerate()
            {
                work.clone_from_slice(beliefs);
                perturb(&mut work, a, sa * step)?;
                perturb(&mut work, b, sb * step)?;
                quad[slot] = cost_at(&work)?;
            }
            let value = (quad[0] - quad[1] - quad[2] + quad[3]) / (4.0 * step * step);
            hessian[(a, b)] = value;
            hessian[(b, a)] = value;
        }
    }
    Ok((hessian, gradient, base))
}

fn locate(flat_index: usize, offsets: &[usize], dims: &[usize]) -> (usize, usize) {
    for (which, (&off, &dim)) in offsets.iter().zip(dims.iter()).enumerate() {
        if flat_index < off + dim {
            return (which, flat_index - off);
        }
    }
    unreachable!("flat index out of range");
}
