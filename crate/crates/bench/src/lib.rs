//! Shared fixtures for the benchmarks: small teams with at least one edge
//! in the weight transition band, so the measured paths are the ones the
//! planner actually exercises.

use nalgebra::{DMatrix, DVector};

use connplan_core::belief::Belief;
use connplan_core::metric::MetricEngine;
use connplan_core::sim::default_connectivity;

/// Positions on a loose ring with spacing chosen so neighboring robots sit
/// near the taper band once the confidence inflation is added.
pub fn ring_beliefs(n: usize) -> Vec<Belief> {
    let radius = 17.0 * n as f64 / std::f64::consts::PI;
    (0..n)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![
                0.08 + 0.01 * (i % 3) as f64,
                0.04 + 0.01 * (i % 2) as f64,
                0.001,
                0.002,
            ]));
            Belief::new(
                DVector::from_vec(vec![radius * angle.cos(), radius * angle.sin(), 0.0, 0.0]),
                cov,
            )
            .expect("valid belief")
        })
        .collect()
}

/// Engine for an `n`-robot team at the documented connectivity parameters.
pub fn engine_for(n: usize) -> MetricEngine {
    MetricEngine::new(default_connectivity(n), vec![0, 1]).expect("engine builds")
}
