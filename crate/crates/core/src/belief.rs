//! Gaussian beliefs, the extended Kalman filter that maintains them, and the
//! belief dynamics the planner differentiates through.
//!
//! A belief pairs a state estimate with its covariance. The planner treats
//! the pair as one flat vector (mean followed by the covariance's lower
//! triangle) so that costs and dynamics can be linearized in a single
//! coordinate system; [`BeliefVector`] owns that flattening.
//!
//! The planning-time dynamics [`belief_g`] differ from a plain EKF step in
//! one respect: no measurement has been taken yet, so the mean rides the
//! noiseless motion model while the covariance is still contracted by the
//! correction the filter will make. The stochastic part of the update, the
//! mean's dependence on the future measurement, has covariance `L H
//! Sigma_bar`; [`belief_noise_scale`] returns its matrix square root.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spectral::symmetric_eigendecomposition;

/// Central-difference step scale for model Jacobians when no analytic form
/// is available.
const JACOBIAN_FD_STEP: f64 = 1e-6;

/// Innovation covariance condition-number cap; corrections beyond this are
/// refused rather than silently amplified.
const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// Motion and sensing model of a single robot.
///
/// Noise is additive: `motion` and `sensing` take the noise sample as an
/// explicit argument, and the filter equations add `process_noise` /
/// `measurement_noise` directly. Jacobians default to central finite
/// differences; linear models override them with the exact matrices.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn measurement_dim(&self) -> usize;

    /// Indices of the position coordinates inside the state vector,
    /// ascending. The connectivity metric reads only these.
    fn position_indices(&self) -> &[usize];

    /// State transition `f(x, u, w)`.
    fn motion(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;

    /// Measurement `h(x, nu)`.
    fn sensing(&self, x: &DVector<f64>, nu: &DVector<f64>) -> DVector<f64>;

    /// Process noise covariance (of `w`).
    fn process_noise(&self) -> &DMatrix<f64>;

    /// Measurement noise covariance (of `nu`).
    fn measurement_noise(&self) -> &DMatrix<f64>;

    /// `df/dx` at `(x, u, 0)`.
    fn motion_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let w = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, n);
        for col in 0..n {
            let h = JACOBIAN_FD_STEP * x[col].abs().max(1.0);
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[col] += h;
            minus[col] -= h;
            let diff = (self.motion(&plus, u, &w) - self.motion(&minus, u, &w)) / (2.0 * h);
            jac.set_column(col, &diff);
        }
        jac
    }

    /// `dh/dx` at `(x, 0)`.
    fn sensing_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let nu = DVector::zeros(self.measurement_dim());
        let mut jac = DMatrix::zeros(self.measurement_dim(), n);
        for col in 0..n {
            let h = JACOBIAN_FD_STEP * x[col].abs().max(1.0);
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[col] += h;
            minus[col] -= h;
            let diff = (self.sensing(&plus, &nu) - self.sensing(&minus, &nu)) / (2.0 * h);
            jac.set_column(col, &diff);
        }
        jac
    }
}

/// Linear time-invariant model `x' = F x + B u + w`, `z = H x + nu` with
/// analytic Jacobians.
#[derive(Debug, Clone)]
pub struct LinearSystemModel {
    pub transition: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub sensing: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    pub measurement_noise: DMatrix<f64>,
    pub position_indices: Vec<usize>,
}

impl LinearSystemModel {
    pub fn new(
        transition: DMatrix<f64>,
        input: DMatrix<f64>,
        sensing: DMatrix<f64>,
        process_noise: DMatrix<f64>,
        measurement_noise: DMatrix<f64>,
        position_indices: Vec<usize>,
    ) -> Result<Self> {
        let n = transition.nrows();
        if transition.ncols() != n || n == 0 {
            return Err(Error::Config("transition matrix must be square".into()));
        }
        if input.nrows() != n {
            return Err(Error::Config(format!(
                "input matrix has {} rows, state dimension is {n}",
                input.nrows()
            )));
        }
        if sensing.ncols() != n {
            return Err(Error::Config(format!(
                "sensing matrix has {} columns, state dimension is {n}",
                sensing.ncols()
            )));
        }
        if process_noise.nrows() != n || process_noise.ncols() != n {
            return Err(Error::Config("process noise must be n x n".into()));
        }
        let l = sensing.nrows();
        if measurement_noise.nrows() != l || measurement_noise.ncols() != l {
            return Err(Error::Config(
                "measurement noise must match the measurement dimension".into(),
            ));
        }
        for &idx in &position_indices {
            if idx >= n {
                return Err(Error::Config(format!(
                    "position index {idx} out of range for state dimension {n}"
                )));
            }
        }
        Ok(Self {
            transition,
            input,
            sensing,
            process_noise,
            measurement_noise,
            position_indices,
        })
    }
}

impl SystemModel for LinearSystemModel {
    fn state_dim(&self) -> usize {
        self.transition.nrows()
    }
    fn input_dim(&self) -> usize {
        self.input.ncols()
    }
    fn measurement_dim(&self) -> usize {
        self.sensing.nrows()
    }
    fn position_indices(&self) -> &[usize] {
        &self.position_indices
    }
    fn motion(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.transition * x + &self.input * u + w
    }
    fn sensing(&self, x: &DVector<f64>, nu: &DVector<f64>) -> DVector<f64> {
        &self.sensing * x + nu
    }
    fn process_noise(&self) -> &DMatrix<f64> {
        &self.process_noise
    }
    fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.measurement_noise
    }
    fn motion_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.transition.clone()
    }
    fn sensing_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.sensing.clone()
    }
}

/// Gaussian belief: state estimate and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl Belief {
    /// Builds a belief, symmetrizing the covariance and rejecting dimension
    /// mismatches, non-finite entries, asymmetry beyond 1e-9 (relative), and
    /// negative diagonal entries.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::Domain(format!(
                "covariance is {}x{}, mean has dimension {n}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("belief contains non-finite entries".into()));
        }
        let scale = covariance.amax().max(1.0);
        for i in 0..n {
            if covariance[(i, i)] < -1e-12 * scale {
                return Err(Error::Domain(format!(
                    "covariance diagonal entry ({i},{i}) = {} is negative",
                    covariance[(i, i)]
                )));
            }
            for j in (i + 1)..n {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::Domain(format!(
                        "covariance is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let mut cov = covariance;
        symmetrize(&mut cov);
        Ok(Self {
            mean,
            covariance: cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks positive semidefiniteness through the eigensolver. Costs an
    /// eigendecomposition; meant for mission boundaries and tests, not the
    /// filter hot path.
    pub fn validate_psd(&self) -> Result<()> {
        let spectrum = symmetric_eigendecomposition(&self.covariance)?;
        let floor = -1e-9 * self.covariance.amax().max(1.0);
        if spectrum.eigenvalues[0] < floor {
            return Err(Error::Domain(format!(
                "covariance has negative eigenvalue {}",
                spectrum.eigenvalues[0]
            )));
        }
        Ok(())
    }
}

/// Flattened belief: mean first, then the covariance's lower triangle in
/// row-major order, `n + n(n+1)/2` entries total. This is the coordinate
/// system every planner derivative is taken in.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefVector {
    data: DVector<f64>,
    state_dim: usize,
}

/// Position of covariance entry `(row, col)`, `row >= col`, inside the
/// lower-triangle block of a [`BeliefVector`].
pub fn lower_triangle_index(row: usize, col: usize) -> usize {
    debug_assert!(row >= col);
    row * (row + 1) / 2 + col
}

/// Number of lower-triangle entries for an `n`-dimensional state.
pub fn lower_triangle_len(n: usize) -> usize {
    n * (n + 1) / 2
}

impl BeliefVector {
    pub fn from_belief(belief: &Belief) -> Self {
        let n = belief.dim();
        let mut data = DVector::zeros(n + lower_triangle_len(n));
        data.rows_mut(0, n).copy_from(&belief.mean);
        let mut k = n;
        for row in 0..n {
            for col in 0..=row {
                data[k] = belief.covariance[(row, col)];
                k += 1;
            }
        }
        Self {
            data,
            state_dim: n,
        }
    }

    /// Rebuilds the belief, mirroring the lower triangle. Fails if the
    /// stored coordinates do not form a valid belief (e.g. a perturbation
    /// drove a diagonal entry negative).
    pub fn to_belief(&self) -> Result<Belief> {
        let n = self.state_dim;
        let mean = self.data.rows(0, n).into_owned();
        let mut cov = DMatrix::zeros(n, n);
        let mut k = n;
        for row in 0..n {
            for col in 0..=row {
                cov[(row, col)] = self.data[k];
                cov[(col, row)] = self.data[k];
                k += 1;
            }
        }
        Belief::new(mean, cov)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    /// Copy with coordinate `index` shifted by `step`; mirrors through
    /// [`Self::to_belief`], so off-diagonal covariance perturbations touch
    /// both symmetric entries.
    pub fn perturbed(&self, index: usize, step: f64) -> Self {
        let mut data = self.data.clone();
        data[index] += step;
        Self {
            data,
            state_dim: self.state_dim,
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn check_input_dims(model: &dyn SystemModel, belief: &Belief, u: &DVector<f64>) -> Result<()> {
    if belief.dim() != model.state_dim() {
        return Err(Error::Domain(format!(
            "belief dimension {} does not match state dimension {}",
            belief.dim(),
            model.state_dim()
        )));
    }
    if u.len() != model.input_dim() {
        return Err(Error::Domain(format!(
            "input dimension {} does not match model input dimension {}",
            u.len(),
            model.input_dim()
        )));
    }
    Ok(())
}

/// EKF prediction: mean through the noiseless motion model, covariance
/// through the motion Jacobian plus process noise.
pub fn ekf_predict(model: &dyn SystemModel, belief: &Belief, u: &DVector<f64>) -> Result<Belief> {
    check_input_dims(model, belief, u)?;
    let zero_w = DVector::zeros(model.state_dim());
    let mean = model.motion(&belief.mean, u, &zero_w);
    let f = model.motion_jacobian(&belief.mean, u);
    let mut cov = &f * &belief.covariance * f.transpose() + model.process_noise();
    symmetrize(&mut cov);
    Belief::new(mean, cov)
}

/// EKF correction for measurement `z` taken at the predicted belief.
///
/// Fails with a numerical error when the innovation covariance is singular
/// or worse conditioned than `1e12`.
pub fn ekf_correct(model: &dyn SystemModel, predicted: &Belief, z: &DVector<f64>) -> Result<Belief> {
    if z.len() != model.measurement_dim() {
        return Err(Error::Domain(format!(
            "measurement dimension {} does not match model dimension {}",
            z.len(),
            model.measurement_dim()
        )));
    }
    let (gain, h) = kalman_gain(model, predicted)?;
    let zero_nu = DVector::zeros(model.measurement_dim());
    let innovation = z - model.sensing(&predicted.mean, &zero_nu);
    let mean = &predicted.mean + &gain * innovation;
    let mut cov = &predicted.covariance - &gain * &h * &predicted.covariance;
    symmetrize(&mut cov);
    Belief::new(mean, cov)
}

/// Kalman gain and sensing Jacobian at a predicted belief.
fn kalman_gain(model: &dyn SystemModel, predicted: &Belief) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let h = model.sensing_jacobian(&predicted.mean);
    let mut innovation_cov = &h * &predicted.covariance * h.transpose() + model.measurement_noise();
    symmetrize(&mut innovation_cov);
    let spectrum = symmetric_eigendecomposition(&innovation_cov)?;
    let smallest = spectrum.eigenvalues[0];
    let largest = spectrum.eigenvalues[spectrum.eigenvalues.len() - 1];
    if smallest <= 0.0 || largest / smallest > MAX_INNOVATION_CONDITION {
        return Err(Error::Numerical(format!(
            "innovation covariance is singular or ill-conditioned \
             (eigenvalue range [{smallest:.3e}, {largest:.3e}])"
        )));
    }
    let inverse = innovation_cov
        .try_inverse()
        .ok_or_else(|| Error::Numerical("innovation covariance inversion failed".into()))?;
    Ok((&predicted.covariance * h.transpose() * inverse, h))
}

/// Planning-time belief dynamics: one EKF prediction followed by the
/// covariance contraction of the correction, with the mean held at the
/// prediction because the future measurement is unknown (zero innovation).
pub fn belief_g(model: &dyn SystemModel, belief: &Belief, u: &DVector<f64>) -> Result<Belief> {
    let predicted = ekf_predict(model, belief, u)?;
    let (gain, h) = kalman_gain(model, &predicted)?;
    let mut cov = &predicted.covariance - &gain * &h * &predicted.covariance;
    symmetrize(&mut cov);
    Belief::new(predicted.mean, cov)
}

/// Square root `W` of the belief-mean update covariance `L H Sigma_bar`:
/// the stochastic part of [`belief_g`] is `W m` on the mean block (and zero
/// on the covariance block) with `m` standard normal.
///
/// Tries Cholesky first; if the product is only semidefinite, falls back to
/// an eigendecomposition with eigenvalues in `[-1e-8, 0)` clamped to zero.
pub fn belief_noise_scale(
    model: &dyn SystemModel,
    belief: &Belief,
    u: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let predicted = ekf_predict(model, belief, u)?;
    let (gain, h) = kalman_gain(model, &predicted)?;
    let mut product = gain * h * &predicted.covariance;
    symmetrize(&mut product);
    if let Some(chol) = product.clone().cholesky() {
        return Ok(chol.l());
    }
    let spectrum = symmetric_eigendecomposition(&product)?;
    let scale = product.amax().max(1.0);
    let mut roots = DVector::zeros(spectrum.eigenvalues.len());
    for i in 0..spectrum.eigenvalues.len() {
        let lam = spectrum.eigenvalues[i];
        if lam < -1e-8 * scale {
            return Err(Error::Numerical(format!(
                "belief update covariance has negative eigenvalue {lam:.3e}"
            )));
        }
        roots[i] = lam.max(0.0).sqrt();
    }
    Ok(&spectrum.eigenvectors * DMatrix::from_diagonal(&roots) * spectrum.eigenvectors.transpose())
}
