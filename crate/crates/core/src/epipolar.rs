//! Calibrated two-view geometry.
//!
//! Everything here works in intrinsics-normalized image coordinates and uses
//! the convention `p'ᵀ E p = 0`, where `p = (u, v, 1)` lives in the first view
//! and `p' = (u', v', 1)` in the second. A relative pose `(R, t)` maps points
//! from the first camera frame into the second: `X₂ = R X₁ + t`, so that
//! `E = [t]ₓ R`.
//!
//! Essential matrices are flattened column-major (`Vec(E)`), which is the
//! order matching the design-matrix monomials
//! `[uu', uv', u, vu', vv', v, u', v', 1]`.

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen, Vector3};
use thiserror::Error;

/// Minimum number of correspondences (or positively weighted ones) a linear
/// solve needs.
pub const MIN_CORRESPONDENCES: usize = 8;

/// Relative eigenvalue gap under which the normal matrix is treated as
/// rank-deficient.
pub const DEGENERACY_TOLERANCE: f64 = 1e-12;

/// Default labeling threshold on the symmetric epipolar distance.
pub const DEFAULT_INLIER_THRESHOLD: f64 = 1e-2;

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Vec9 = SVector<f64, 9>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate configuration: normal matrix is rank deficient")]
    Degenerate,
    #[error("epipolar line is undefined (point maps to the epipole)")]
    EpipoleDegenerate,
    #[error("no pose candidate places any correspondence in front of both cameras")]
    CheiralityFailure,
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn from_fov(width: f64, height: f64, fov_degrees: f64) -> Result<Self> {
        let f = 0.5 * width / (0.5 * fov_degrees.to_radians()).tan();
        Self::new(f, f, 0.5 * width, 0.5 * height)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.fx, self.fy, self.cx, self.cy];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidInput(
                "intrinsics must be finite".into(),
            ));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidInput(
                "focal lengths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, px: [f64; 2]) -> [f64; 2] {
        [(px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy]
    }

    pub fn denormalize(&self, n: [f64; 2]) -> [f64; 2] {
        [n[0] * self.fx + self.cx, n[1] * self.fy + self.cy]
    }
}

/// Putative correspondences `(u, v, u', v')` in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    coords: Vec<[f64; 4]>,
}

impl CorrespondenceSet {
    pub fn new(coords: Vec<[f64; 4]>) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidInput(
                "correspondence coordinates must be finite".into(),
            ));
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn as_slice(&self) -> &[[f64; 4]] {
        &self.coords
    }

    pub fn iter(&self) -> std::slice::Iter<'_, [f64; 4]> {
        self.coords.iter()
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
        }
    }

    pub fn into_inner(self) -> Vec<[f64; 4]> {
        self.coords
    }
}

impl std::ops::Index<usize> for CorrespondenceSet {
    type Output = [f64; 4];

    fn index(&self, i: usize) -> &[f64; 4] {
        &self.coords[i]
    }
}

/// A 3×3 essential matrix with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix {
    m: Matrix3<f64>,
    rank2: bool,
}

impl EssentialMatrix {
    /// Scales `m` to unit Frobenius norm.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let norm = m.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GeometryError::InvalidInput(
                "essential matrix must be finite and non-zero".into(),
            ));
        }
        Ok(Self {
            m: m / norm,
            rank2: false,
        })
    }

    /// Wraps an already unit-norm matrix without touching its bits. Used when
    /// reading stored matrices back.
    pub fn from_normalized(m: Matrix3<f64>, rank2: bool) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) || (m.norm() - 1.0).abs() > 1e-12 {
            return Err(GeometryError::InvalidInput(
                "essential matrix must have unit Frobenius norm".into(),
            ));
        }
        Ok(Self { m, rank2 })
    }

    /// Builds from a column-major `Vec(E)`, normalizing to unit length.
    pub fn from_vec(v: &[f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_column_slice(v))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn is_rank2(&self) -> bool {
        self.rank2
    }

    /// Column-major flattening `Vec(E)`.
    pub fn to_vec(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out.copy_from_slice(self.m.as_slice());
        out
    }

    pub fn negated(&self) -> Self {
        Self {
            m: -self.m,
            rank2: self.rank2,
        }
    }

    /// `min(‖E − F‖, ‖E + F‖)` in Frobenius norm.
    pub fn sign_invariant_distance(&self, other: &EssentialMatrix) -> f64 {
        (self.m - other.m).norm().min((self.m + other.m).norm())
    }
}

/// Relative pose with a unit-norm translation direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl RelativePose {
    /// Normalizes `t`; rejects non-rotations.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(orth < 1e-9) || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidInput(
                "rotation must be orthonormal with det +1".into(),
            ));
        }
        let n = t.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(GeometryError::InvalidInput(
                "translation must be non-zero".into(),
            ));
        }
        Ok(Self { r, t: t / n })
    }
}

/// Maps pixel coordinates to normalized coordinates.
pub fn normalize_points(pixels: &[[f64; 2]], k: &CameraIntrinsics) -> Result<Vec<[f64; 2]>> {
    k.validate()?;
    if pixels.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GeometryError::InvalidInput(
            "pixel coordinates must be finite".into(),
        ));
    }
    Ok(pixels.iter().map(|&p| k.normalize(p)).collect())
}

/// Inverse of [`normalize_points`].
pub fn denormalize_points(points: &[[f64; 2]], k: &CameraIntrinsics) -> Result<Vec<[f64; 2]>> {
    k.validate()?;
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GeometryError::InvalidInput(
            "normalized coordinates must be finite".into(),
        ));
    }
    Ok(points.iter().map(|&p| k.denormalize(p)).collect())
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `[t]ₓ R` at unit Frobenius norm.
pub fn essential_from_pose(pose: &RelativePose) -> EssentialMatrix {
    // ‖[t]ₓR‖_F = √2 ‖t‖ for any rotation, never zero for a valid pose.
    let m = skew(&pose.t) * pose.r;
    EssentialMatrix::from_matrix(m).expect("valid pose yields a non-zero essential matrix")
}

/// One design-matrix row: `[uu', uv', u, vu', vv', v, u', v', 1]`.
#[inline]
pub fn design_row(c: &[f64; 4]) -> [f64; 9] {
    let [u, v, up, vp] = *c;
    [u * up, u * vp, u, v * up, v * vp, v, up, vp, 1.0]
}

/// The `N × 9` design matrix, row-major.
pub fn build_design_matrix(x: &CorrespondenceSet) -> Vec<[f64; 9]> {
    x.iter().map(design_row).collect()
}

/// `Xᵀ diag(w) X`.
pub fn weighted_normal_matrix(x: &CorrespondenceSet, w: &[f64]) -> Mat9 {
    let mut acc = [0.0f64; 81];
    for (c, &wi) in x.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        let r = design_row(c);
        for a in 0..9 {
            let ra = wi * r[a];
            for b in a..9 {
                acc[a * 9 + b] += ra * r[b];
            }
        }
    }
    for a in 0..9 {
        for b in 0..a {
            acc[a * 9 + b] = acc[b * 9 + a];
        }
    }
    Mat9::from_row_slice(&acc)
}

/// Eigendecomposition of a normal matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct NormalEigen {
    pub values: [f64; 9],
    /// Columns are the eigenvectors matching `values`.
    pub vectors: Mat9,
}

impl NormalEigen {
    pub fn new(m: Mat9) -> Self {
        let eig = SymmetricEigen::new(m);
        let mut order: [usize; 9] = std::array::from_fn(|i| i);
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.map(|i| eig.eigenvalues[i]);
        let mut vectors = Mat9::zeros();
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Self { values, vectors }
    }

    /// `σ₁ − σ₀` relative to the largest eigenvalue magnitude.
    pub fn relative_gap(&self) -> f64 {
        let scale = self.values[8].abs().max(self.values[0].abs());
        if scale == 0.0 {
            return 0.0;
        }
        (self.values[1] - self.values[0]) / scale
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.relative_gap() >= DEGENERACY_TOLERANCE)
    }

    /// Smallest-eigenvalue eigenvector with the sign convention applied,
    /// together with the sign (+1 or −1) that was applied to the raw column.
    pub fn smallest(&self) -> (Vec9, f64) {
        let v: Vec9 = self.vectors.column(0).into_owned();
        let s = sign_fix(v.as_slice());
        (v * s, s)
    }
}

/// Sign making the largest-magnitude component positive (earliest index wins
/// ties).
pub fn sign_fix(v: &[f64]) -> f64 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn check_weights(x: &CorrespondenceSet, w: &[f64]) -> Result<()> {
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
    Ok(())
}

/// Decomposes `Xᵀ diag(w) X`, failing on too few positive weights or a
/// rank-deficient normal matrix.
pub fn weighted_normal_eigen(x: &CorrespondenceSet, w: &[f64]) -> Result<NormalEigen> {
    check_weights(x, w)?;
    let eig = NormalEigen::new(weighted_normal_matrix(x, w));
    if eig.is_degenerate() {
        return Err(GeometryError::Degenerate);
    }
    Ok(eig)
}

/// Weighted 8-point: smallest eigenvector of `Xᵀ diag(w) X` as an essential
/// matrix. Not rank-2 constrained.
pub fn weighted_eight_point(x: &CorrespondenceSet, w: &[f64]) -> Result<EssentialMatrix> {
    let eig = weighted_normal_eigen(x, w)?;
    let (v, _) = eig.smallest();
    let m = Matrix3::from_column_slice(v.as_slice());
    Ok(EssentialMatrix { m, rank2: false })
}

/// Classical (unweighted) 8-point.
pub fn eight_point(x: &CorrespondenceSet) -> Result<EssentialMatrix> {
    if x.len() < MIN_CORRESPONDENCES {
        return Err(GeometryError::TooFewCorrespondences {
            needed: MIN_CORRESPONDENCES,
            got: x.len(),
        });
    }
    weighted_eight_point(x, &vec![1.0; x.len()])
}

/// SVD of a 3×3 matrix with singular values sorted descending.
fn sorted_svd3(m: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut us = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut ss = Vector3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        vs.set_column(dst, &v.column(src));
        ss[dst] = s[src];
    }
    (us, ss, vs)
}

/// Frobenius-nearest rank-2 matrix, renormalized to unit norm.
pub fn rank2_project(e: &EssentialMatrix) -> EssentialMatrix {
    let (u, mut s, v) = sorted_svd3(&e.m);
    s[2] = 0.0;
    let m = u * Matrix3::from_diagonal(&s) * v.transpose();
    let norm = m.norm();
    EssentialMatrix {
        m: m / norm,
        rank2: true,
    }
}

/// Signed distance from `p'` to the epipolar line `E p` in the second image.
pub fn epipolar_distance(p: &Vector3<f64>, pp: &Vector3<f64>, e: &Matrix3<f64>) -> Result<f64> {
    let l = e * p;
    let den = (l.x * l.x + l.y * l.y).sqrt();
    if den == 0.0 {
        return Err(GeometryError::EpipoleDegenerate);
    }
    Ok(pp.dot(&l) / den)
}

/// `|d(p, E p')| + |d(p', Eᵀ p)|`.
pub fn symmetric_epipolar_distance(
    p: &Vector3<f64>,
    pp: &Vector3<f64>,
    e: &Matrix3<f64>,
) -> Result<f64> {
    let forward = epipolar_distance(p, pp, e)?;
    let backward = epipolar_distance(pp, p, &e.transpose())?;
    Ok(forward.abs() + backward.abs())
}

/// Symmetric epipolar distance of one correspondence; `∞` where a line is
/// undefined.
#[inline]
pub fn correspondence_distance(e: &Matrix3<f64>, c: &[f64; 4]) -> f64 {
    let [u, v, up, vp] = *c;
    // E p
    let l0 = e[(0, 0)] * u + e[(0, 1)] * v + e[(0, 2)];
    let l1 = e[(1, 0)] * u + e[(1, 1)] * v + e[(1, 2)];
    let l2 = e[(2, 0)] * u + e[(2, 1)] * v + e[(2, 2)];
    // Eᵀ p'
    let m0 = e[(0, 0)] * up + e[(1, 0)] * vp + e[(2, 0)];
    let m1 = e[(0, 1)] * up + e[(1, 1)] * vp + e[(2, 1)];
    let num = (up * l0 + vp * l1 + l2).abs();
    let d1 = (l0 * l0 + l1 * l1).sqrt();
    let d2 = (m0 * m0 + m1 * m1).sqrt();
    if d1 == 0.0 || d2 == 0.0 {
        return f64::INFINITY;
    }
    num / d1 + num / d2
}

/// Symmetric epipolar distance of every correspondence.
pub fn residuals(x: &CorrespondenceSet, e: &EssentialMatrix) -> Vec<f64> {
    x.iter().map(|c| correspondence_distance(&e.m, c)).collect()
}

/// `y_i = 1` iff the symmetric epipolar distance is strictly below `threshold`.
pub fn label_inliers(x: &CorrespondenceSet, e_star: &EssentialMatrix, threshold: f64) -> Vec<bool> {
    x.iter()
        .map(|c| correspondence_distance(&e_star.m, c) < threshold)
        .collect()
}

pub fn homogeneous(u: f64, v: f64) -> Vector3<f64> {
    Vector3::new(u, v, 1.0)
}

/// Midpoint triangulation of one correspondence under `(r, t)`; returns the
/// depths of the midpoint in both cameras, or `None` for parallel rays.
fn midpoint_depths(r: &Matrix3<f64>, t: &Vector3<f64>, c: &[f64; 4]) -> Option<(f64, f64)> {
    let d1 = homogeneous(c[0], c[1]);
    let rt = r.transpose();
    let c2 = -(rt * t);
    let d2 = rt * homogeneous(c[2], c[3]);
    let a = d1.dot(&d1);
    let b = d1.dot(&d2);
    let cc = d2.dot(&d2);
    let d = d1.dot(&c2);
    let e = d2.dot(&c2);
    let denom = a * cc - b * b;
    if !(denom > 1e-12 * a * cc) {
        return None;
    }
    let l1 = (d * cc - b * e) / denom;
    let l2 = (b * d - a * e) / denom;
    let x = 0.5 * (d1 * l1 + c2 + d2 * l2);
    let x2 = r * x + t;
    Some((x.z, x2.z))
}

/// The four `(R, t)` factorizations of a rank-2 essential matrix, in
/// enumeration order `(Ra, t), (Ra, −t), (Rb, t), (Rb, −t)`.
pub fn pose_candidates(e: &EssentialMatrix) -> [RelativePose; 4] {
    let (mut u, _, mut v) = sorted_svd3(&e.m);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v.determinant() < 0.0 {
        v = -v;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let ra = u * w * v.transpose();
    let rb = u * w.transpose() * v.transpose();
    let t: Vector3<f64> = u.column(2).into_owned().normalize();
    [
        RelativePose { r: ra, t },
        RelativePose { r: ra, t: -t },
        RelativePose { r: rb, t },
        RelativePose { r: rb, t: -t },
    ]
}

/// Weighted count of correspondences triangulating in front of both cameras.
pub fn cheirality_score(pose: &RelativePose, x: &CorrespondenceSet, w: &[f64]) -> f64 {
    x.iter()
        .zip(w)
        .filter(|(_, &wi)| wi > 0.0)
        .filter_map(|(c, &wi)| {
            midpoint_depths(&pose.r, &pose.t, c)
                .filter(|&(z1, z2)| z1 > 0.0 && z2 > 0.0)
                .map(|_| wi)
        })
        .sum()
}

/// Recovers `(R, t)` from a rank-2 essential matrix by cheirality voting.
pub fn decompose_essential(
    e: &EssentialMatrix,
    x: &CorrespondenceSet,
    w: &[f64],
) -> Result<RelativePose> {
    if !e.rank2 {
        return Err(GeometryError::InvalidInput(
            "decomposition requires a rank-2 projected essential matrix".into(),
        ));
    }
    if w.len() != x.len() {
        return Err(GeometryError::LengthMismatch {
            what: "weights",
            expected: x.len(),
            got: w.len(),
        });
    }
    if !w.iter().any(|&v| v > 0.0) {
        return Err(GeometryError::TooFewCorrespondences { needed: 1, got: 0 });
    }
    let mut best: Option<(f64, RelativePose)> = None;
    for cand in pose_candidates(e) {
        let score = cheirality_score(&cand, x, w);
        if score > 0.0 && best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, cand));
        }
    }
    best.map(|(_, p)| p).ok_or(GeometryError::CheiralityFailure)
}

/// Geodesic distance between two rotations, in degrees.
///
/// Evaluated as `atan2(sin θ, cos θ)` of the relative rotation, which agrees
/// with `arccos((tr(RᵀR*) − 1)/2)` but keeps full precision near 0° and 180°.
pub fn rotation_angle_error(r: &Matrix3<f64>, r_star: &Matrix3<f64>) -> f64 {
    let q = r.transpose() * r_star;
    let cos = ((q.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(
        q[(2, 1)] - q[(1, 2)],
        q[(0, 2)] - q[(2, 0)],
        q[(1, 0)] - q[(0, 1)],
    );
    let sin = (axis.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

/// Angle between two translation directions, in degrees.
pub fn translation_angle_error(t: &Vector3<f64>, t_star: &Vector3<f64>) -> f64 {
    let a = t.normalize();
    let b = t_star.normalize();
    let cos = a.dot(&b).clamp(-1.0, 1.0);
    let sin = a.cross(&b).norm();
    sin.atan2(cos).to_degrees()
}
