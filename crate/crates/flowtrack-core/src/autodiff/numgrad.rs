//! Central finite-difference utilities for verifying analytic gradients.
//!
//! Verification always runs in `f64`; the truncation error of the central
//! quotient is O(eps^2).

use ndarray::ArrayD;

pub const DEFAULT_EPS: f64 = 1e-3;

/// Central finite-difference gradient of `f` with respect to `input`,
/// evaluated entry by entry.
pub fn central_diff(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    input: &ArrayD<f64>,
    eps: f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(input.raw_dim());
    let mut probe = input.clone();
    for idx in ndarray::indices(input.raw_dim()) {
        let orig = probe[&idx];
        probe[&idx] = orig + eps;
        let plus = f(&probe);
        probe[&idx] = orig - eps;
        let minus = f(&probe);
        probe[&idx] = orig;
        grad[&idx] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Central finite-difference derivative at a subset of flat entry indices.
pub fn central_diff_at(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    input: &ArrayD<f64>,
    flat_indices: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut probe = input.clone();
    let mut out = Vec::with_capacity(flat_indices.len());
    for &fi in flat_indices {
        let orig = probe.as_slice().unwrap()[fi];
        probe.as_slice_mut().unwrap()[fi] = orig + eps;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[fi] = orig - eps;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[fi] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    out
}

/// Relative error with a magnitude floor so near-zero gradients are judged
/// on an absolute scale.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error across two gradient arrays.
pub fn max_rel_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_error(a, n, floor))
        .fold(0.0, f64::max)
}
