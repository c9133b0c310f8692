//! Proximity-graph spectra: edge weights, Laplacians, and a symmetric
//! eigensolver with deterministic ordering and sign conventions.
//!
//! Robot teams here are small (a handful of nodes) but their connectivity
//! eigenvalue is evaluated millions of times during planning and Monte Carlo
//! validation, so the solver is a cyclic Jacobi sweep: unconditionally stable
//! at this scale, allocation-light, and fully deterministic, which matters
//! because planner runs must reproduce bit-for-bit across worker counts.
//!
//! The algebraic connectivity of a weighted graph is the second-smallest
//! eigenvalue of its Laplacian `L = D - A`. It is zero exactly when the graph
//! is disconnected and grows with how well-knit the graph is, up to `n` for
//! the complete graph on `n` unit-weight edges. The eigenvector paired with
//! it (the Fiedler vector) tells each node how it sits relative to the
//! graph's weakest cut, which is what the planner differentiates through.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sweep cap for the Jacobi solver. Quadratic convergence means well under
/// ten sweeps in practice for the sizes this crate handles; hitting the cap
/// signals something is badly wrong with the input.
const MAX_SWEEPS: usize = 100;

/// Off-diagonal Frobenius norm threshold declaring the iteration converged,
/// relative to the scale of the matrix.
const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Symmetry tolerance on inputs, relative to the largest entry magnitude.
const SYMMETRY_TOL: f64 = 1e-9;

/// Eigenvalue gap below which the second-smallest eigenvalue is treated as
/// repeated and its eigenvector direction as untrustworthy for gradients.
pub const LAMBDA2_GAP_TOL: f64 = 1e-9;

/// Hard 0/1 edge weight: robots within `delta` of each other communicate.
pub fn binary_edge_weight(distance: f64, delta: f64) -> Result<f64> {
    if !distance.is_finite() || distance < 0.0 {
        return Err(Error::Domain(format!(
            "edge distance must be finite and non-negative, got {distance}"
        )));
    }
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::Domain(format!(
            "communication range must be finite and positive, got {delta}"
        )));
    }
    Ok(if distance <= delta { 1.0 } else { 0.0 })
}

/// Smooth edge weight: 1 up to `delta0`, a half-cosine taper on
/// `(delta0, delta]`, and 0 beyond `delta`. Continuously differentiable in
/// the distance measure, which the planner relies on; the taper's slope is
/// zero at both ends of the band.
pub fn smooth_edge_weight(measure: f64, delta0: f64, delta: f64) -> Result<f64> {
    if !measure.is_finite() || measure < 0.0 {
        return Err(Error::Domain(format!(
            "distance measure must be finite and non-negative, got {measure}"
        )));
    }
    check_band(delta0, delta)?;
    if measure <= delta0 {
        Ok(1.0)
    } else if measure <= delta {
        let phase = std::f64::consts::PI * (measure - delta0) / (delta - delta0);
        Ok(0.5 + 0.5 * phase.cos())
    } else {
        Ok(0.0)
    }
}

/// Validates the taper band `0 < delta0 < delta`.
pub(crate) fn check_band(delta0: f64, delta: f64) -> Result<()> {
    if !(delta0.is_finite() && delta.is_finite()) || delta0 <= 0.0 || delta0 >= delta {
        return Err(Error::Config(format!(
            "weight taper band requires 0 < delta0 < delta, got delta0 = {delta0}, delta = {delta}"
        )));
    }
    Ok(())
}

/// Graph Laplacian `L = D - A` from a symmetric non-negative weight matrix
/// with zero diagonal. Row sums of the result are zero by construction.
pub fn laplacian(weights: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = weights.nrows();
    if n == 0 || weights.ncols() != n {
        return Err(Error::Domain(format!(
            "weight matrix must be square and non-empty, got {}x{}",
            weights.nrows(),
            weights.ncols()
        )));
    }
    let scale = weights.amax().max(1.0);
    for i in 0..n {
        if weights[(i, i)].abs() > 1e-12 * scale {
            return Err(Error::Domain(format!(
                "weight matrix must have zero diagonal, entry ({i},{i}) = {}",
                weights[(i, i)]
            )));
        }
        for j in (i + 1)..n {
            let wij = weights[(i, j)];
            let wji = weights[(j, i)];
            if (wij - wji).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Domain(format!(
                    "weight matrix must be symmetric, entries ({i},{j}) = {wij} and ({j},{i}) = {wji}"
                )));
            }
            if !wij.is_finite() || wij < 0.0 || !wji.is_finite() || wji < 0.0 {
                return Err(Error::Domain(format!(
                    "edge weights must be finite and non-negative, got ({i},{j}) = {wij}"
                )));
            }
        }
    }
    let mut lap = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            if j != i {
                let w = 0.5 * (weights[(i, j)] + weights[(j, i)]);
                lap[(i, j)] = -w;
                degree += w;
            }
        }
        lap[(i, i)] = degree;
    }
    Ok(lap)
}

/// Full eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct LaplacianSpectrum {
    /// Eigenvalues sorted ascending.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors; column `i` pairs with `eigenvalues[i]`.
    /// Each column's largest-magnitude entry is positive (first such entry
    /// on ties), making the decomposition deterministic.
    pub eigenvectors: DMatrix<f64>,
}

impl LaplacianSpectrum {
    /// Second-smallest eigenvalue: the algebraic connectivity when the
    /// decomposed matrix is a graph Laplacian.
    ///
    /// Panics if the matrix was 1x1; connectivity questions need two nodes.
    pub fn lambda2(&self) -> f64 {
        assert!(
            self.eigenvalues.len() >= 2,
            "second-smallest eigenvalue requires at least a 2x2 matrix"
        );
        self.eigenvalues[1]
    }

    /// Eigenvector paired with [`Self::lambda2`] (the Fiedler vector for a
    /// Laplacian).
    pub fn fiedler_vector(&self) -> DVector<f64> {
        assert!(self.eigenvalues.len() >= 2);
        self.eigenvectors.column(1).into_owned()
    }

    /// True when the second-smallest eigenvalue is repeated (within
    /// [`LAMBDA2_GAP_TOL`] of the third-smallest), in which case its
    /// eigenvector direction is arbitrary and gradients through it are
    /// undefined.
    pub fn lambda2_is_repeated(&self) -> bool {
        let n = self.eigenvalues.len();
        n >= 3 && (self.eigenvalues[2] - self.eigenvalues[1]).abs() < LAMBDA2_GAP_TOL
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Rejects non-square or asymmetric (beyond `1e-9` relative) input; fails
/// with a numerical error if the off-diagonal mass has not vanished after
/// [`MAX_SWEEPS`] sweeps. Reconstruction `V D V^T` matches the input to
/// `1e-8 * max(1, |M|_max)`.
pub fn symmetric_eigendecomposition(matrix: &DMatrix<f64>) -> Result<LaplacianSpectrum> {
    let n = matrix.nrows();
    if n == 0 || matrix.ncols() != n {
        return Err(Error::Domain(format!(
            "eigendecomposition needs a square non-empty matrix, got {}x{}",
            matrix.nrows(),
            matrix.ncols()
        )));
    }
    let scale = matrix.amax().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (matrix[(i, j)] - matrix[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Domain(format!(
                    "matrix is not symmetric: ({i},{j}) = {} vs ({j},{i}) = {}",
                    matrix[(i, j)],
                    matrix[(j, i)]
                )));
            }
            if !matrix[(i, j)].is_finite() {
                return Err(Error::Domain(format!(
                    "matrix entry ({i},{j}) is not finite"
                )));
            }
        }
        if !matrix[(i, i)].is_finite() {
            return Err(Error::Domain(format!("matrix entry ({i},{i}) is not finite")));
        }
    }

    let mut a = matrix.clone();
    // Work on the exactly symmetric part so rotations cannot reintroduce
    // asymmetry from entries that differed at the last few ulps.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut v = DMatrix::<f64>::identity(n, n);
    let off_tol = OFF_DIAGONAL_TOL * matrix.norm().max(1.0);

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= off_tol {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                // Rotation angle zeroing a[(p,q)], smaller-root form for
                // stability (Golub & Van Loan style).
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > off_tol {
        return Err(Error::Numerical(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps \
             (off-diagonal norm {:.3e})",
            off_diagonal_norm(&a)
        )));
    }

    // Sort ascending; ties keep diagonal order so the result is deterministic.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).expect("finite eigenvalues"));

    let mut eigenvalues = DVector::zeros(n);
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (slot, &idx) in order.iter().enumerate() {
        eigenvalues[slot] = a[(idx, idx)];
        let mut col = v.column(idx).into_owned();
        // Sign convention: first largest-magnitude entry made positive.
        let mut lead = 0;
        for k in 1..n {
            if col[k].abs() > col[lead].abs() {
                lead = k;
            }
        }
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        eigenvectors.set_column(slot, &col);
    }

    Ok(LaplacianSpectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// Algebraic connectivity of a weighted graph: builds the Laplacian and
/// returns its full spectrum so callers can read `lambda2`, the Fiedler
/// vector, and the repeated-eigenvalue flag from one decomposition.
pub fn algebraic_connectivity(weights: &DMatrix<f64>) -> Result<LaplacianSpectrum> {
    if weights.nrows() < 2 {
        return Err(Error::Domain(
            "connectivity needs at least two robots".to_string(),
        ));
    }
    symmetric_eigendecomposition(&laplacian(weights)?)
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[(i, j)] * a[(i, j)];
            }
        }
    }
    sum.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn binary_weight_is_one_inside_range_and_at_the_boundary() {
        assert_eq!(binary_edge_weight(20.0, 40.0).unwrap(), 1.0);
        assert_eq!(binary_edge_weight(40.0, 40.0).unwrap(), 1.0);
        assert_eq!(binary_edge_weight(40.001, 40.0).unwrap(), 0.0);
    }

    #[test]
    fn binary_weight_rejects_bad_domain() {
        assert!(binary_edge_weight(-1.0, 40.0).is_err());
        assert!(binary_edge_weight(f64::NAN, 40.0).is_err());
        assert!(binary_edge_weight(10.0, 0.0).is_err());
        assert!(binary_edge_weight(10.0, -5.0).is_err());
    }

    #[test]
    fn smooth_weight_matches_the_three_branches() {
        assert_eq!(smooth_edge_weight(20.0, 35.0, 40.0).unwrap(), 1.0);
        assert_relative_eq!(
            smooth_edge_weight(37.5, 35.0, 40.0).unwrap(),
            0.5,
            epsilon = 1e-14
        );
        assert_eq!(smooth_edge_weight(45.0, 35.0, 40.0).unwrap(), 0.0);
    }

    #[test]
    fn smooth_weight_is_continuous_at_band_edges() {
        let just_below = smooth_edge_weight(35.0 - 1e-9, 35.0, 40.0).unwrap();
        let just_above = smooth_edge_weight(35.0 + 1e-9, 35.0, 40.0).unwrap();
        assert!((just_below - just_above).abs() < 1e-12);
        let near_delta = smooth_edge_weight(40.0 - 1e-9, 35.0, 40.0).unwrap();
        assert!(near_delta < 1e-12);
        assert_eq!(smooth_edge_weight(40.0, 35.0, 40.0).unwrap(), 0.0);
    }

    #[test]
    fn smooth_weight_rejects_inverted_band() {
        assert!(smooth_edge_weight(10.0, 40.0, 35.0).is_err());
        assert!(smooth_edge_weight(10.0, 40.0, 40.0).is_err());
        assert!(smooth_edge_weight(10.0, 0.0, 40.0).is_err());
    }

    #[test]
    fn laplacian_of_a_single_unit_edge() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let lap = laplacian(&w).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(lap, expected);
    }

    #[test]
    fn laplacian_of_zero_weights_is_zero() {
        let w = DMatrix::zeros(3, 3);
        assert_eq!(laplacian(&w).unwrap(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn laplacian_of_complete_triangle() {
        let mut w = DMatrix::from_element(3, 3, 1.0);
        w.fill_diagonal(0.0);
        let lap = laplacian(&w).unwrap();
        let expected =
            DMatrix::from_row_slice(3, 3, &[2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0]);
        assert_eq!(lap, expected);
        for i in 0..3 {
            assert_eq!(lap.row(i).sum(), 0.0);
        }
    }

    #[test]
    fn laplacian_rejects_asymmetry_negative_weights_and_nonzero_diagonal() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]);
        assert!(laplacian(&asym).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(laplacian(&neg).is_err());
        let diag = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        assert!(laplacian(&diag).is_err());
    }

    #[test]
    fn eigendecomposition_of_identity() {
        let spectrum = symmetric_eigendecomposition(&DMatrix::identity(3, 3)).unwrap();
        for i in 0..3 {
            assert_relative_eq!(spectrum.eigenvalues[i], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn eigendecomposition_of_single_edge_laplacian() {
        let lap = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let spectrum = symmetric_eigendecomposition(&lap).unwrap();
        assert_relative_eq!(spectrum.eigenvalues[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(spectrum.eigenvalues[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn eigendecomposition_reconstructs_the_input() {
        // Fixed symmetric 5x5 with distinct eigenvalues.
        let m = DMatrix::from_row_slice(
            5,
            5,
            &[
                4.0, 1.0, -2.0, 0.5, 0.0, //
                1.0, 3.0, 0.0, -1.0, 0.3, //
                -2.0, 0.0, 5.0, 0.7, -0.4, //
                0.5, -1.0, 0.7, 2.0, 1.1, //
                0.0, 0.3, -0.4, 1.1, 1.0,
            ],
        );
        let spectrum = symmetric_eigendecomposition(&m).unwrap();
        let d = DMatrix::from_diagonal(&spectrum.eigenvalues);
        let rebuilt = &spectrum.eigenvectors * d * spectrum.eigenvectors.transpose();
        assert!((&rebuilt - &m).amax() <= 1e-8 * m.amax().max(1.0));
        let gram = spectrum.eigenvectors.transpose() * &spectrum.eigenvectors;
        assert!((&gram - DMatrix::identity(5, 5)).amax() < 1e-10);
        for i in 1..5 {
            assert!(spectrum.eigenvalues[i] >= spectrum.eigenvalues[i - 1]);
        }
    }

    #[test]
    fn eigendecomposition_rejects_asymmetric_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(symmetric_eigendecomposition(&m).is_err());
    }

    #[test]
    fn eigenvector_sign_convention_is_deterministic() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let spectrum = symmetric_eigendecomposition(&m).unwrap();
        for col in 0..3 {
            let v = spectrum.eigenvectors.column(col);
            let mut lead = 0;
            for k in 1..3 {
                if v[k].abs() > v[lead].abs() {
                    lead = k;
                }
            }
            assert!(v[lead] > 0.0);
        }
    }

    #[test]
    fn connectivity_of_disconnected_graph_is_zero() {
        // Two disjoint pairs.
        let mut w = DMatrix::zeros(4, 4);
        w[(0, 1)] = 1.0;
        w[(1, 0)] = 1.0;
        w[(2, 3)] = 1.0;
        w[(3, 2)] = 1.0;
        let spectrum = algebraic_connectivity(&w).unwrap();
        assert!(spectrum.lambda2().abs() < 1e-10);
    }

    #[test]
    fn connectivity_of_complete_six_node_graph_is_six() {
        let mut w = DMatrix::from_element(6, 6, 1.0);
        w.fill_diagonal(0.0);
        let spectrum = algebraic_connectivity(&w).unwrap();
        assert_relative_eq!(spectrum.lambda2(), 6.0, epsilon = 1e-10);
        assert!(spectrum.lambda2_is_repeated());
    }

    #[test]
    fn connectivity_of_two_node_unit_graph_is_two() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let spectrum = algebraic_connectivity(&w).unwrap();
        assert_relative_eq!(spectrum.lambda2(), 2.0, epsilon = 1e-12);
        assert!(!spectrum.lambda2_is_repeated());
    }

    #[test]
    fn path_graph_lambda2_is_strictly_between_disconnected_and_complete() {
        // 0-1-2 path with unit weights: eigenvalues 0, 1, 3.
        let mut w = DMatrix::zeros(3, 3);
        w[(0, 1)] = 1.0;
        w[(1, 0)] = 1.0;
        w[(1, 2)] = 1.0;
        w[(2, 1)] = 1.0;
        let spectrum = algebraic_connectivity(&w).unwrap();
        assert_relative_eq!(spectrum.lambda2(), 1.0, epsilon = 1e-10);
        assert_relative_eq!(spectrum.eigenvalues[2], 3.0, epsilon = 1e-10);
        assert!(!spectrum.lambda2_is_repeated());
    }

    #[test]
    fn fiedler_vector_satisfies_the_eigen_equation() {
        let mut w = DMatrix::zeros(4, 4);
        for (i, j, val) in [(0, 1, 1.0), (1, 2, 0.5), (2, 3, 1.0), (0, 3, 0.25)] {
            w[(i, j)] = val;
            w[(j, i)] = val;
        }
        let lap = laplacian(&w).unwrap();
        let spectrum = symmetric_eigendecomposition(&lap).unwrap();
        let residual = &lap * spectrum.fiedler_vector() - spectrum.lambda2() * spectrum.fiedler_vector();
        assert!(residual.amax() < 1e-10);
    }
}
