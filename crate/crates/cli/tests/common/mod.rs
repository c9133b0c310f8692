//! Independent oracles for the acceptance suite.
//!
//! Everything here is deliberately written against the textbook definitions
//! rather than the library's own routines, so agreement between the two is
//! evidence and not circularity: eigenvalues come from Sylvester inertia
//! counts with hand-rolled determinants, the Kalman filter uses the
//! standard predict/correct formulas with an explicit inverse, and the LQR
//! reference runs its own backward Riccati recursion.

use nalgebra::{DMatrix, DVector};

/// Determinant by Gaussian elimination with partial pivoting. Small dense
/// matrices only; written out so the oracle shares no code with the crate
/// under test.
fn determinant(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "determinant needs a square matrix");
    if n == 0 {
        return 1.0;
    }
    let mut a = m.clone();
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[(row, col)].abs() > a[(pivot, col)].abs() {
                pivot = row;
            }
        }
        if a[(pivot, col)] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap_rows(pivot, col);
            det = -det;
        }
        det *= a[(col, col)];
        for row in (col + 1)..n {
            let factor = a[(row, col)] / a[(col, col)];
            for k in col..n {
                a[(row, k)] -= factor * a[(col, k)];
            }
        }
    }
    det
}

/// Number of eigenvalues of symmetric `m` strictly below `x`, by Sylvester's
/// law of inertia: the sign changes along the sequence of leading principal
/// minors of `m - x I` count the negative eigenvalues. A vanishing minor
/// means `x` grazes an eigenvalue of a leading block; the caller retries at
/// a jittered shift.
fn count_below(m: &DMatrix<f64>, x: f64) -> Option<usize> {
    let n = m.nrows();
    let shifted = m - DMatrix::<f64>::identity(n, n) * x;
    let mut negatives = 0;
    let mut previous = 1.0_f64;
    for k in 1..=n {
        let minor = determinant(&shifted.view((0, 0), (k, k)).into_owned());
        if minor == 0.0 {
            return None;
        }
        if minor.signum() != previous.signum() {
            negatives += 1;
        }
        previous = minor;
    }
    Some(negatives)
}

fn eigenvalue_count(m: &DMatrix<f64>, x: f64, scale: f64) -> usize {
    let mut shift = x;
    let mut jitter = 1e-12 * scale.max(1.0);
    loop {
        if let Some(count) = count_below(m, shift) {
            return count;
        }
        shift = x + jitter;
        jitter *= 2.0;
    }
}

/// Eigenvalues of a small symmetric matrix in ascending order, each pinned
/// by bisection on the inertia count within the Gershgorin interval.
pub fn charpoly_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols());
    assert!(n <= 6, "oracle is intended for matrices up to 6x6");
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let radius: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
        lo = lo.min(m[(i, i)] - radius);
        hi = hi.max(m[(i, i)] + radius);
    }
    let scale = hi.abs().max(lo.abs()).max(1.0);
    let (lo, hi) = (lo - scale * 1e-9, hi + scale * 1e-9);
    (1..=n)
        .map(|k| {
            // Smallest x with at least k eigenvalues at or below it.
            let mut a = lo;
            let mut b = hi;
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if eigenvalue_count(m, mid, scale) >= k {
                    b = mid;
                } else {
                    a = mid;
                }
                if b - a <= 1e-13 * scale {
                    break;
                }
            }
            0.5 * (a + b)
        })
        .collect()
}

/// One textbook linear Kalman filter step: time update with known input,
/// then measurement update with an explicit innovation-covariance inverse.
#[allow(clippy::too_many_arguments)]
pub fn kalman_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    u: &DVector<f64>,
    z: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let predicted_mean = a * mean + b * u;
    let predicted_cov = a * cov * a.transpose() + q;
    let innovation_cov = h * &predicted_cov * h.transpose() + r;
    let gain = &predicted_cov
        * h.transpose()
        * innovation_cov
            .try_inverse()
            .expect("innovation covariance must be invertible");
    let mean = &predicted_mean + &gain * (z - h * &predicted_mean);
    let eye = DMatrix::<f64>::identity(cov.nrows(), cov.ncols());
    let cov = (&eye - &gain * h) * &predicted_cov;
    ((mean), (&cov + cov.transpose()) * 0.5)
}

/// Finite-horizon discrete LQR about a fixed reference: terminal state cost
/// only, per-step input cost. Returns the optimal input sequence and the
/// closed-loop state trajectory from `x0`.
pub fn finite_horizon_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w_terminal: &DMatrix<f64>,
    w_input: &DMatrix<f64>,
    horizon: usize,
    x0: &DVector<f64>,
    x_ref: &DVector<f64>,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut gains: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
    // The cost is u' Wu u each step (factor 1, matching a quadratic written
    // without the conventional 1/2), so the Riccati recursion carries the
    // same convention throughout.
    let mut s = w_terminal.clone();
    for _ in 0..horizon {
        let quu = w_input + b.transpose() * &s * b;
        let k = quu
            .try_inverse()
            .expect("input-cost block must be invertible")
            * (b.transpose() * &s * a);
        s = a.transpose() * &s * (a - b * &k);
        s = (&s + s.transpose()) * 0.5;
        gains.push(k);
    }
    gains.reverse();
    let mut states = vec![x0.clone()];
    let mut inputs = Vec::with_capacity(horizon);
    for k in gains {
        let error = states.last().expect("nonempty") - x_ref;
        let u = -&k * error;
        let next = a * states.last().expect("nonempty") + b * &u;
        inputs.push(u);
        states.push(next);
    }
    (inputs, states)
}

#[cfg(test)]
mod self_checks {
    use super::*;

    #[test]
    fn determinant_matches_cofactor_expansion() {
        let m = nalgebra::dmatrix![2.0, -1.0; 3.0, 4.0];
        assert!((determinant(&m) - 11.0).abs() < 1e-12);
        let m = nalgebra::dmatrix![0.0, 1.0; 1.0, 0.0];
        assert!((determinant(&m) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_pins_a_known_spectrum() {
        // diag(1, 2, 5) rotated by a permutation keeps its eigenvalues.
        let m = nalgebra::dmatrix![2.0, 0.0, 0.0; 0.0, 5.0, 0.0; 0.0, 0.0, 1.0];
        let eigs = charpoly_eigenvalues(&m);
        assert!((eigs[0] - 1.0).abs() < 1e-10);
        assert!((eigs[1] - 2.0).abs() < 1e-10);
        assert!((eigs[2] - 5.0).abs() < 1e-10);
    }
}
