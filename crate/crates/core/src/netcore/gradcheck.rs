//! Central finite-difference oracle for unit tests.

use ndarray::Array2;
use rand::Rng;

use super::FeatureMap;
use crate::rng;

/// `|a − b| / max(|a|, |b|, 1e-5)`. The floor absorbs round-off on
/// gradients that are exactly zero analytically.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

pub fn random_map(seed: u64, pairs: usize, n: usize, c: usize) -> FeatureMap {
    let mut r = rng::from_seed(seed);
    FeatureMap::from_rows(
        Array2::from_shape_fn((pairs * n, c), |_| r.random_range(-2.0..2.0)),
        pairs,
    )
}

/// Central difference of `f` with respect to `values[idx]`.
pub fn central_diff(values: &mut [f64], idx: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = values[idx];
    values[idx] = orig + h;
    let plus = f(values);
    values[idx] = orig - h;
    let minus = f(values);
    values[idx] = orig;
    (plus - minus) / (2.0 * h)
}
