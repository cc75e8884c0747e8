//! Differentiable weighted 8-point solve.
//!
//! Forward: smallest eigenvector of `M = Xᵀ diag(w) X`, sign-fixed exactly as
//! in [`crate::epipolar::weighted_eight_point`]. Backward: first-order
//! perturbation of a symmetric eigenvector,
//!
//! ```text
//! du₀ = Σ_{j≠0} u_j (u_jᵀ dM u₀) / (σ₀ − σ_j),    dM/dw_i = x_i x_iᵀ
//! ```
//!
//! which gives `∂L/∂w_i = (x_i·u₀) Σ_{j≠0} c_j (x_i·u_j)` with
//! `c_j = (u_j·∂L/∂u₀) / (σ₀ − σ_j)`. This is the selected column of
//! `dU = U (K̃ ⊙ Uᵀ dM U)` with `K̃_ij = 1/(σ_j − σ_i)` off the diagonal.

use crate::epipolar::{
    design_row, weighted_normal_matrix, CorrespondenceSet, GeometryError, NormalEigen,
    MIN_CORRESPONDENCES,
};

/// Smallest admissible `|σ₀ − σ_j|` in the backward pass.
pub const EIGEN_GAP_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct EigenCache {
    pub eigen: NormalEigen,
    /// Sign applied to the raw eigenvector by the sign convention.
    pub sign: f64,
    rows: Vec<[f64; 9]>,
}

impl EigenCache {
    /// `σ₁ − σ₀`.
    pub fn gap(&self) -> f64 {
        self.eigen.values[1] - self.eigen.values[0]
    }

    /// Same cache with the eigenvector sign flipped.
    pub fn with_flipped_sign(&self) -> Self {
        let mut c = self.clone();
        c.sign = -c.sign;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenGrad {
    pub grad_w: Vec<f64>,
    /// Set when an eigenvalue gap had to be clamped.
    pub degraded: bool,
}

/// Weighted eigen-solve returning `Vec(E)` and the cache for
/// [`eigen_backward`]. Rank-deficient normal matrices are not rejected here;
/// the backward pass reports them as degraded instead.
pub fn weighted_eigen_solve(
    x: &CorrespondenceSet,
    w: &[f64],
) -> Result<([f64; 9], EigenCache), GeometryError> {
    if w.len() != x.len() {
        return Err(GeometryError::LengthMismatch {
            what: "weights",
            expected: x.len(),
            got: w.len(),
        });
    }
    if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(GeometryError::InvalidInput(
            "weights must be finite and non-negative".into(),
        ));
    }
    let positive = w.iter().filter(|&&v| v > 0.0).count();
    if positive < MIN_CORRESPONDENCES {
        return Err(GeometryError::TooFewCorrespondences {
            needed: MIN_CORRESPONDENCES,
            got: positive,
        });
    }
    let eigen = NormalEigen::new(weighted_normal_matrix(x, w));
    let (v, sign) = eigen.smallest();
    let mut e = [0.0; 9];
    e.copy_from_slice(v.as_slice());
    let rows = x.iter().map(design_row).collect();
    Ok((e, EigenCache { eigen, sign, rows }))
}

/// `∂L/∂w` from `∂L/∂Vec(E)`.
pub fn eigen_backward(grad_e: &[f64; 9], cache: &EigenCache) -> EigenGrad {
    let u = &cache.eigen.vectors;
    let sig = &cache.eigen.values;
    let mut degraded = false;
    // c_j = (u_j · s g) / (σ₀ − σ_j)
    let mut c = [0.0f64; 9];
    for j in 1..9 {
        let proj: f64 = (0..9).map(|k| u[(k, j)] * grad_e[k]).sum::<f64>() * cache.sign;
        let mut den = sig[0] - sig[j];
        if den.abs() < EIGEN_GAP_CLAMP {
            degraded = true;
            den = if den > 0.0 { EIGEN_GAP_CLAMP } else { -EIGEN_GAP_CLAMP };
        }
        c[j] = proj / den;
    }
    // Fold c into one 9-vector: v = Σ_j c_j u_j.
    let mut v = [0.0f64; 9];
    for j in 1..9 {
        for k in 0..9 {
            v[k] += c[j] * u[(k, j)];
        }
    }
    let grad_w = cache
        .rows
        .iter()
        .map(|r| {
            let a0: f64 = (0..9).map(|k| r[k] * u[(k, 0)]).sum();
            let av: f64 = (0..9).map(|k| r[k] * v[k]).sum();
            a0 * av
        })
        .collect();
    EigenGrad { grad_w, degraded }
}
