//! Two-view domain types, projective primitives and pose error metrics.
//!
//! Conventions used throughout the crate:
//! - points are homogenized by appending 1, never rescaled;
//! - a fundamental matrix maps a point of the first image to its epipolar
//!   line in the second image, `p2ᵀ F p1 = 0`;
//! - a relative pose maps first-camera coordinates into the second camera,
//!   `X2 = R X1 + t`, so that `E = [t]ₓ R`.

use std::f64::consts::TAU;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, SVD};

use crate::error::{Error, Result};

/// Pixel coordinates of a keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }

    pub fn coords(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn distance(&self, other: &ImagePoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if a >= TAU {
        0.0
    } else {
        a
    }
}

/// An orientation- and scale-covariant keypoint (SIFT, SURF, ORB, ...).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftFeature {
    pub point: ImagePoint,
    /// Orientation in radians, normalized to `[0, 2π)`.
    pub angle: f64,
    pub scale: f64,
}

impl SiftFeature {
    pub fn new(point: ImagePoint, angle: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidScale(scale));
        }
        if !point.is_finite() || !angle.is_finite() {
            return Err(Error::NonFinite("feature"));
        }
        Ok(Self {
            point,
            angle: normalize_angle(angle),
            scale,
        })
    }

    /// Unit direction `(cos α, sin α)`.
    pub fn direction(&self) -> Vector2<f64> {
        Vector2::new(self.angle.cos(), self.angle.sin())
    }
}

/// A matched pair of covariant features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftCorrespondence {
    pub first: SiftFeature,
    pub second: SiftFeature,
}

impl SiftCorrespondence {
    pub fn new(first: SiftFeature, second: SiftFeature) -> Self {
        Self { first, second }
    }

    /// Relative scale `q = q2 / q1`.
    pub fn scale_ratio(&self) -> f64 {
        self.second.scale / self.first.scale
    }

    pub fn points(&self) -> (ImagePoint, ImagePoint) {
        (self.first.point, self.second.point)
    }
}

/// Point pair plus the 2×2 local affinity mapping the first image
/// neighbourhood onto the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineCorrespondence {
    pub p1: ImagePoint,
    pub p2: ImagePoint,
    /// Row-major `a1, a2, a3, a4`.
    pub a: [f64; 4],
}

impl AffineCorrespondence {
    pub fn new(p1: ImagePoint, p2: ImagePoint, a: [f64; 4]) -> Self {
        Self { p1, p2, a }
    }

    pub fn from_matrix(p1: ImagePoint, p2: ImagePoint, a: &Matrix2<f64>) -> Self {
        Self::new(p1, p2, [a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]])
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.a[0], self.a[1], self.a[2], self.a[3])
    }

    pub fn det(&self) -> f64 {
        self.a[0] * self.a[3] - self.a[1] * self.a[2]
    }
}

/// Scales `m` to unit Frobenius norm with its largest-magnitude entry positive.
pub(crate) fn canonical_scale(m: &Matrix3<f64>) -> Matrix3<f64> {
    let norm = m.norm();
    if norm == 0.0 || !norm.is_finite() {
        return *m;
    }
    let mut largest = 0.0f64;
    for x in m.iter() {
        if x.abs() > largest.abs() {
            largest = *x;
        }
    }
    let sign = if largest < 0.0 { -1.0 } else { 1.0 };
    m * (sign / norm)
}

/// Row-major 9-vector of a 3×3 matrix.
pub fn to_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

pub fn from_row_major(v: &[f64]) -> Matrix3<f64> {
    assert!(v.len() >= 9, "need 9 entries for a 3x3 matrix");
    Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}

/// Uncalibrated two-view model, stored at unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    /// Wraps `m`, rescaling it to the canonical storage scale. Rank is not
    /// enforced here; solvers produce rank-2 matrices themselves.
    pub fn new(m: Matrix3<f64>) -> Self {
        Self(canonical_scale(&m))
    }

    pub fn from_row_major(v: &[f64]) -> Self {
        Self::new(from_row_major(v))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        to_row_major(&self.0)
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }

    /// Closest rank-2 matrix in Frobenius norm.
    pub fn rank2_projected(&self) -> Self {
        let svd = SVD::new(self.0, true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut s = svd.singular_values;
        let min = s.imin();
        s[min] = 0.0;
        Self::new(u * Matrix3::from_diagonal(&s) * vt)
    }

    /// Entrywise distance to `other` after resolving the sign ambiguity.
    pub fn distance(&self, other: &FundamentalMatrix) -> f64 {
        let a = self.0 / self.0.norm();
        let b = other.0 / other.0.norm();
        (a - b).amax().min((a + b).amax())
    }
}

/// Calibrated two-view model. Solver output is kept raw; use
/// [`EssentialMatrix::projected`] for the nearest matrix on the essential
/// manifold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(Matrix3<f64>);

impl EssentialMatrix {
    pub fn new(m: Matrix3<f64>) -> Self {
        Self(canonical_scale(&m))
    }

    pub fn from_pose(pose: &RelativePose) -> Self {
        Self::new(skew(&pose.translation) * pose.rotation)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        to_row_major(&self.0)
    }

    /// Projection onto singular values `(1, 1, 0)`.
    pub fn projected(&self) -> Self {
        let svd = SVD::new(self.0, true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let min = svd.singular_values.imin();
        let mut s = Vector3::new(1.0, 1.0, 1.0);
        s[min] = 0.0;
        Self::new(u * Matrix3::from_diagonal(&s) * vt)
    }

    /// Frobenius norm of `2 E Eᵀ E − trace(E Eᵀ) E` for unit-norm `E`.
    pub fn trace_residual(&self) -> f64 {
        let e = self.0 / self.0.norm();
        let eet = e * e.transpose();
        (2.0 * eet * e - eet.trace() * e).norm()
    }

    pub fn to_fundamental(&self, k1: &CameraIntrinsics, k2: &CameraIntrinsics) -> Result<FundamentalMatrix> {
        let k1i = k1.inverse()?;
        let k2i = k2.inverse()?;
        Ok(FundamentalMatrix::new(k2i.transpose() * self.0 * k1i))
    }

    pub fn from_fundamental(f: &FundamentalMatrix, k1: &CameraIntrinsics, k2: &CameraIntrinsics) -> Self {
        Self::new(k2.matrix().transpose() * f.matrix() * k1.matrix())
    }

    pub fn distance(&self, other: &EssentialMatrix) -> f64 {
        let a = self.0 / self.0.norm();
        let b = other.0 / other.0.norm();
        (a - b).amax().min((a + b).amax())
    }
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Self {
        Self { fx, fy, cx, cy, skew }
    }

    pub fn simple(focal: f64, cx: f64, cy: f64) -> Self {
        Self::new(focal, focal, cx, cy, 0.0)
    }

    pub fn identity() -> Self {
        Self::new(1.0, 1.0, 0.0, 0.0, 0.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Reads `K` from a row-major 3×3; the last row must be `0 0 1`.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let scale = m[(2, 2)];
        if scale == 0.0 || m[(2, 0)] != 0.0 || m[(2, 1)] != 0.0 || m[(1, 0)] != 0.0 {
            return Err(Error::SingularIntrinsics);
        }
        let m = m / scale;
        let k = Self::new(m[(0, 0)], m[(1, 1)], m[(0, 2)], m[(1, 2)], m[(0, 1)]);
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::SingularIntrinsics);
        }
        Ok(k)
    }

    pub fn inverse(&self) -> Result<Matrix3<f64>> {
        if self.fx == 0.0 || self.fy == 0.0 || !(self.fx * self.fy).is_finite() {
            return Err(Error::SingularIntrinsics);
        }
        self.matrix().try_inverse().ok_or(Error::SingularIntrinsics)
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Linear part of `K⁻¹` acting on image directions.
    pub(crate) fn inverse_linear(&self) -> Result<Matrix2<f64>> {
        let ki = self.inverse()?;
        Ok(Matrix2::new(ki[(0, 0)], ki[(0, 1)], ki[(1, 0)], ki[(1, 1)]))
    }
}

/// Rotation and unit translation direction between two calibrated cameras.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let n = translation.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            rotation,
            translation: translation / n,
        })
    }
}

/// Homogeneous line `a u + b v + c = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EpipolarLine {
    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(self.a, self.b)
    }

    /// `(a, b) = (0, 0)`: the query point was an epipole.
    pub fn is_degenerate(&self) -> bool {
        self.a == 0.0 && self.b == 0.0
    }

    pub fn distance(&self, p: &ImagePoint) -> f64 {
        (self.a * p.u + self.b * p.v + self.c).abs() / self.a.hypot(self.b)
    }
}

/// Which image the epipolar line lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSide {
    /// `F p`: line in the second image induced by a first-image point.
    Right,
    /// `Fᵀ p`: line in the first image induced by a second-image point.
    Left,
}

pub fn epipolar_line(f: &FundamentalMatrix, p: &ImagePoint, side: LineSide) -> EpipolarLine {
    let l = match side {
        LineSide::Right => f.matrix() * p.homogeneous(),
        LineSide::Left => f.matrix().transpose() * p.homogeneous(),
    };
    EpipolarLine {
        a: l.x,
        b: l.y,
        c: l.z,
    }
}

/// Average of the point-to-epipolar-line distances in both images.
///
/// Returns `+∞` when both line normals vanish. When only one vanishes the
/// distance in the other image is returned.
pub fn symmetric_epipolar_error(f: &Matrix3<f64>, p1: &ImagePoint, p2: &ImagePoint) -> f64 {
    let x1 = p1.homogeneous();
    let x2 = p2.homogeneous();
    let l2 = f * x1;
    let l1 = f.transpose() * x2;
    let r = x2.dot(&l2).abs();
    let n1 = l1.x.hypot(l1.y);
    let n2 = l2.x.hypot(l2.y);
    match (n1 > 0.0, n2 > 0.0) {
        (true, true) => 0.5 * r * (1.0 / n1 + 1.0 / n2),
        (true, false) => r / n1,
        (false, true) => r / n2,
        (false, false) => f64::INFINITY,
    }
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let m = r_gt.transpose() * r_est;
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = (axis.norm() / 2.0).min(1.0);
    // atan2 keeps full precision near 0 and π where acos alone does not
    sin.atan2(cos).to_degrees()
}

/// Sign-agnostic angle between translation directions, in degrees.
pub fn translation_error(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> Result<f64> {
    if t_est.norm() == 0.0 || t_gt.norm() == 0.0 {
        return Err(Error::ZeroVector);
    }
    let angle = t_est.cross(t_gt).norm().atan2(t_est.dot(t_gt)).to_degrees();
    Ok(angle.min(180.0 - angle))
}

pub fn relative_focal_error(f_est: f64, f_gt: f64) -> Result<f64> {
    if !(f_gt > 0.0) {
        return Err(Error::NonPositiveFocal(f_gt));
    }
    Ok((f_est - f_gt).abs() / f_gt)
}

/// Cross-product matrix `[t]ₓ`.
pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Applies `K⁻¹` to every point.
pub fn normalize_points(points: &[ImagePoint], k: &CameraIntrinsics) -> Result<Vec<ImagePoint>> {
    let ki = k.inverse()?;
    Ok(points
        .iter()
        .map(|p| {
            let x = ki * p.homogeneous();
            ImagePoint::new(x.x / x.z, x.y / x.z)
        })
        .collect())
}

/// Depths `(λ1, λ2)` with `λ2 x2 = λ1 R x1 + t`, or `None` for parallel rays.
fn triangulate_depths(r: &Matrix3<f64>, t: &Vector3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> Option<(f64, f64)> {
    let a = r * x1;
    let b = x2;
    // least squares on [-a b] [λ1 λ2]ᵀ = t
    let aa = a.dot(&a);
    let bb = b.dot(b);
    let ab = a.dot(b);
    let det = aa * bb - ab * ab;
    if det <= 1e-14 * aa * bb {
        return None;
    }
    let at = a.dot(t);
    let bt = b.dot(t);
    // normal equations of min ‖λ2 b − λ1 a − t‖²
    let l1 = (ab * bt - bb * at) / det;
    let l2 = (aa * bt - ab * at) / det;
    Some((l1, l2))
}

/// Recovers `(R, t)` from an essential matrix by cheirality voting over the
/// four SVD factorizations.
pub fn decompose_essential(
    e: &EssentialMatrix,
    correspondences: &[(ImagePoint, ImagePoint)],
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Result<RelativePose> {
    if correspondences.is_empty() {
        return Err(Error::DegenerateConfiguration);
    }
    let k1i = k1.inverse()?;
    let k2i = k2.inverse()?;
    let rays: Vec<(Vector3<f64>, Vector3<f64>)> = correspondences
        .iter()
        .map(|(p1, p2)| (k1i * p1.homogeneous(), k2i * p2.homogeneous()))
        .collect();

    let projected = e.projected();
    let svd = SVD::new(*projected.matrix(), true, true);
    let mut u = svd.u.unwrap();
    let mut vt = svd.v_t.unwrap();
    // order columns so the null direction is last
    let min = svd.singular_values.imin();
    if min != 2 {
        u.swap_columns(min, 2);
        vt.swap_rows(min, 2);
    }
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if vt.determinant() < 0.0 {
        vt.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t: Vector3<f64> = u.column(2).into();
    let candidates = [
        (u * w * vt, t),
        (u * w * vt, -t),
        (u * w.transpose() * vt, t),
        (u * w.transpose() * vt, -t),
    ];

    let mut best: Option<(usize, RelativePose)> = None;
    for (r, t) in candidates {
        let count = rays
            .iter()
            .filter(|(x1, x2)| matches!(triangulate_depths(&r, &t, x1, x2), Some((a, b)) if a > 0.0 && b > 0.0))
            .count();
        if count > 0 && best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, RelativePose::new(r, t)?));
        }
    }
    best.map(|(_, pose)| pose).ok_or(Error::DegenerateConfiguration)
}

/// Rotation about `axis` by `angle` radians (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = skew(&k);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

pub(crate) fn rot2(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Angle of a 2D vector, in `[0, 2π)`.
pub(crate) fn vector_angle(v: &Vector2<f64>) -> f64 {
    let a = v.y.atan2(v.x);
    if a < 0.0 {
        normalize_angle(a + TAU)
    } else {
        a
    }
}
