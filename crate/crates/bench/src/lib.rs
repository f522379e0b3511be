//! Shared fixtures for the criterion benches.

use std::sync::Arc;

use flatl2o::optimizees::{make_blobs, make_quadratic_family, make_tiny_mlp, Activation, Optimizee};
use flatl2o::rng;

/// 2-20-2 sigmoid classifier on 100 blob points, with a fan-in `θ`.
pub fn blobs_mlp() -> (Optimizee, Vec<f64>) {
    let m = make_tiny_mlp(&[2, 20, 2], Activation::Sigmoid, Arc::new(make_blobs(100, 0, 2.0, 1.0, 0))).expect("valid mlp");
    let th = m.init_theta(&mut rng::from_seed(1));
    (m, th)
}

/// p = 10 quadratic with eigenvalues in [0.5, 2] and a standard-normal `θ⁰`.
pub fn quadratic10() -> (Optimizee, Vec<f64>) {
    let q = make_quadratic_family(10, (0.5, 2.0), 0).expect("valid quadratic");
    let th = q.init_theta(&mut rng::from_seed(1));
    (q, th)
}
