//! Linear constraints on the fundamental/essential matrix and the algebra
//! tying a local affinity to the orientations and scales of a feature pair.
//!
//! Every row is ordered like the row-major entries `f1 … f9` of `F`, so a
//! model annihilates a row when `row · vec(F) = 0`.

use nalgebra::{Matrix2, Matrix3, Vector2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    rot2, to_row_major, vector_angle, AffineCorrespondence, FundamentalMatrix, ImagePoint, SiftCorrespondence,
    SiftFeature,
};

/// Where a coefficient row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Epipolar,
    Sift,
    Affine,
}

/// One linear equation on `vec(F)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientRow(pub [f64; 9]);

impl CoefficientRow {
    pub fn coefficients(&self) -> &[f64; 9] {
        &self.0
    }

    pub fn dot(&self, f: &[f64; 9]) -> f64 {
        self.0.iter().zip(f).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// `|row · f| / (‖row‖ ‖f‖)`.
    pub fn normalized_residual(&self, f: &[f64; 9]) -> f64 {
        let fnorm = f.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = self.norm() * fnorm;
        if denom == 0.0 {
            0.0
        } else {
            self.dot(f).abs() / denom
        }
    }
}

/// Stacked rows feeding a solver, tagged by provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoefficientSystem {
    rows: Vec<CoefficientRow>,
    kinds: Vec<RowKind>,
}

impl CoefficientSystem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: CoefficientRow, kind: RowKind) {
        self.rows.push(row);
        self.kinds.push(kind);
    }

    pub fn rows(&self) -> &[CoefficientRow] {
        &self.rows
    }

    pub fn kinds(&self) -> &[RowKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Largest normalized residual of `f` over all rows.
    pub fn max_residual(&self, f: &Matrix3<f64>) -> f64 {
        let v = to_row_major(f);
        self.rows.iter().map(|r| r.normalized_residual(&v)).fold(0.0, f64::max)
    }

    /// Dense `len × 9` matrix, row for row.
    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows.len(), 9, |i, j| self.rows[i].0[j])
    }
}

/// `p2ᵀ F p1 = 0` expanded over the entries of `F`.
pub fn epipolar_row(p1: &ImagePoint, p2: &ImagePoint) -> CoefficientRow {
    let (u1, v1, u2, v2) = (p1.u, p1.v, p2.u, p2.v);
    CoefficientRow([u2 * u1, u2 * v1, u2, v2 * u1, v2 * v1, v2, u1, v1, 1.0])
}

/// Linear constraint linking orientations, relative scale and `F`.
///
/// It is the dot product `q n2·d2 + n1·d1 = 0` of the epipolar line normals
/// with the feature directions, and never involves `f9`.
pub fn sift_row(c: &SiftCorrespondence) -> Result<CoefficientRow> {
    for s in [c.first.scale, c.second.scale] {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidScale(s));
        }
    }
    let q = c.scale_ratio();
    let (u1, v1) = (c.first.point.u, c.first.point.v);
    let (u2, v2) = (c.second.point.u, c.second.point.v);
    let (s1, c1) = c.first.angle.sin_cos();
    let (s2, c2) = c.second.angle.sin_cos();
    Ok(CoefficientRow([
        c2 * q * u1 + c1 * u2,
        c2 * q * v1 + s1 * u2,
        c2 * q,
        s2 * q * u1 + c1 * v2,
        s2 * q * v1 + s1 * v2,
        s2 * q,
        c1,
        s1,
        0.0,
    ]))
}

/// The two rows stating that `A⁻ᵀ` maps the first epipolar-line normal onto
/// the negated second one.
pub fn affine_rows(ac: &AffineCorrespondence) -> [CoefficientRow; 2] {
    let (u1, v1, u2, v2) = (ac.p1.u, ac.p1.v, ac.p2.u, ac.p2.v);
    let [a1, a2, a3, a4] = ac.a;
    [
        CoefficientRow([u2 + a1 * u1, a1 * v1, a1, v2 + a3 * u1, a3 * v1, a3, 1.0, 0.0, 0.0]),
        CoefficientRow([a2 * u1, u2 + a2 * v1, a2, a4 * u1, v2 + a4 * v1, a4, 0.0, 1.0, 0.0]),
    ]
}

/// A plane-induced projective map between two images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub h: Matrix3<f64>,
}

impl Homography {
    pub fn new(h: Matrix3<f64>) -> Result<Self> {
        let d = h.determinant();
        if d == 0.0 || !d.is_finite() {
            return Err(Error::DegenerateSample("singular homography"));
        }
        Ok(Self { h })
    }

    /// Projective depth `s = u h7 + v h8 + h9`.
    pub fn depth(&self, p: &ImagePoint) -> f64 {
        self.h[(2, 0)] * p.u + self.h[(2, 1)] * p.v + self.h[(2, 2)]
    }

    pub fn project(&self, p: &ImagePoint) -> Result<ImagePoint> {
        let s = self.depth(p);
        let scale = self.h.row(2).abs().sum() * (1.0 + p.u.abs() + p.v.abs());
        if s.abs() <= 1e-12 * scale {
            return Err(Error::PointAtInfinity(s));
        }
        let x = self.h * p.homogeneous();
        Ok(ImagePoint::new(x.x / s, x.y / s))
    }

    /// Normalized DLT from four or more point pairs.
    pub fn from_points(pairs: &[(ImagePoint, ImagePoint)]) -> Result<Self> {
        if pairs.len() < 4 {
            return Err(Error::WrongSampleSize {
                expected: 4,
                got: pairs.len(),
            });
        }
        let first: Vec<ImagePoint> = pairs.iter().map(|p| p.0).collect();
        let second: Vec<ImagePoint> = pairs.iter().map(|p| p.1).collect();
        let t1 = crate::solvers::hartley_transform(&first).ok_or(Error::DegenerateSample("coincident points"))?;
        let t2 = crate::solvers::hartley_transform(&second).ok_or(Error::DegenerateSample("coincident points"))?;

        let mut rows: Vec<[f64; 9]> = Vec::with_capacity(2 * pairs.len());
        for (a, b) in pairs {
            let x = t1.apply(a);
            let y = t2.apply(b);
            rows.push([x.u, x.v, 1.0, 0.0, 0.0, 0.0, -y.u * x.u, -y.u * x.v, -y.u]);
            rows.push([0.0, 0.0, 0.0, x.u, x.v, 1.0, -y.v * x.u, -y.v * x.v, -y.v]);
        }
        let ns = crate::solvers::null_space(&rows, 1)?;
        let h = ns[0];
        let hn = crate::geometry::from_row_major(&h);
        let t2i = t2.inverse_matrix();
        Self::new(t2i * hn * t1.matrix())
    }
}

/// First-order approximation of `H` around `p1`: the point it maps to and
/// the Jacobian of the map.
pub fn affine_from_homography(h: &Homography, p1: &ImagePoint) -> Result<AffineCorrespondence> {
    let p2 = h.project(p1)?;
    let s = h.depth(p1);
    let m = &h.h;
    let a1 = (m[(0, 0)] - m[(2, 0)] * p2.u) / s;
    let a2 = (m[(0, 1)] - m[(2, 1)] * p2.u) / s;
    let a3 = (m[(1, 0)] - m[(2, 0)] * p2.v) / s;
    let a4 = (m[(1, 1)] - m[(2, 1)] * p2.v) / s;
    Ok(AffineCorrespondence::new(*p1, p2, [a1, a2, a3, a4]))
}

/// Second-image orientation and scale predicted by an affinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftTransfer {
    pub alpha2: f64,
    pub q2: f64,
    /// `‖A d(α1)‖ − √det A`; zero when the circle and scale constraints agree.
    pub circle_residual: f64,
}

/// Maps a first-image orientation and scale through `A`.
///
/// The angle follows the image of the oriented unit direction, the scale
/// follows the area change `q2 = q1 √det A`.
pub fn sift_from_affine(a: &Matrix2<f64>, alpha1: f64, q1: f64) -> Result<SiftTransfer> {
    let det = a.determinant();
    if !(det > 0.0) {
        return Err(Error::MirroredFeature(det));
    }
    if !(q1 > 0.0) {
        return Err(Error::InvalidScale(q1));
    }
    let v = a * Vector2::new(alpha1.cos(), alpha1.sin());
    let root = det.sqrt();
    Ok(SiftTransfer {
        alpha2: vector_angle(&v),
        q2: q1 * root,
        circle_residual: v.norm() - root,
    })
}

/// Residuals of the three generators relating `A` to a feature pair:
/// the scale constraint and the two rows of the circle constraint.
pub fn decomposition_residuals(a: &Matrix2<f64>, sift: &SiftCorrespondence) -> [f64; 3] {
    let q = sift.scale_ratio();
    let (s1, c1) = sift.first.angle.sin_cos();
    let (s2, c2) = sift.second.angle.sin_cos();
    let (a1, a2, a3, a4) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    [
        a2 * a3 - a1 * a4 + q * q,
        a3 * c1 + a4 * s1 - s2 * q,
        a1 * c1 + a2 * s1 - c2 * q,
    ]
}

/// The older single orientation constraint. It equals
/// `s2·r3 − c2·r2` for the circle residuals `r2, r3`, so it does not see
/// the relative scale at all.
pub fn legacy_combined_residual(a: &Matrix2<f64>, sift: &SiftCorrespondence) -> f64 {
    let (s1, c1) = sift.first.angle.sin_cos();
    let (s2, c2) = sift.second.angle.sin_cos();
    let (a1, a2, a3, a4) = (a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
    c1 * s2 * a1 + s1 * s2 * a2 - c1 * c2 * a3 - c2 * s1 * a4
}

/// Jacobian factor `J = R(α) [[qu, w], [0, qv]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianDecomposition {
    pub alpha: f64,
    pub qu: f64,
    pub qv: f64,
    pub w: f64,
}

impl JacobianDecomposition {
    pub fn matrix(&self) -> Matrix2<f64> {
        rot2(self.alpha) * Matrix2::new(self.qu, self.w, 0.0, self.qv)
    }

    /// QR-style split of an orientation-preserving Jacobian.
    pub fn from_matrix(j: &Matrix2<f64>) -> Result<Self> {
        let det = j.determinant();
        if !(det > 0.0) {
            return Err(Error::MirroredFeature(det));
        }
        let col = Vector2::new(j[(0, 0)], j[(1, 0)]);
        let alpha = vector_angle(&col);
        let u = rot2(-alpha) * j;
        Ok(Self {
            alpha,
            qu: col.norm(),
            qv: u[(1, 1)],
            w: u[(0, 1)],
        })
    }

    /// Feature scale `√det U`.
    pub fn scale(&self) -> f64 {
        (self.qu * self.qv).sqrt()
    }
}

/// Orientations `α1` for which `‖A d(α1)‖² = det A`, i.e. where the circle
/// constraint and the area-based scale ratio coincide.
///
/// Returns four angles in general, an empty list for non-positive `det A`
/// and `None` when every angle qualifies (`A` is a scaled rotation).
pub fn consistent_orientations(a: &Matrix2<f64>) -> Option<Vec<f64>> {
    let det = a.determinant();
    if !(det > 0.0) {
        return Some(Vec::new());
    }
    let m = a.transpose() * a;
    let mean = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    let radius = half_diff.hypot(m[(0, 1)]);
    if radius <= 1e-14 * mean {
        return None;
    }
    // d(α)ᵀ M d(α) = mean + radius cos(2α − φ)
    let phi = m[(0, 1)].atan2(half_diff);
    let delta = ((det - mean) / radius).clamp(-1.0, 1.0).acos();
    let base = [0.5 * (phi + delta), 0.5 * (phi - delta)];
    Some(
        base.iter()
            .flat_map(|&b| [b, b + std::f64::consts::PI])
            .map(crate::geometry::normalize_angle)
            .collect(),
    )
}

/// Picks one consistent orientation at random (uniform when all qualify).
pub(crate) fn sample_consistent_orientation<R: Rng + ?Sized>(a: &Matrix2<f64>, rng: &mut R) -> Option<f64> {
    match consistent_orientations(a) {
        None => Some(rng.random_range(0.0..std::f64::consts::TAU)),
        Some(v) if v.is_empty() => None,
        Some(v) => Some(v[rng.random_range(0..v.len())]),
    }
}

/// A feature pair generated to be exactly consistent with a known `F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistentSift {
    pub correspondence: SiftCorrespondence,
    pub affine: AffineCorrespondence,
}

const RESAMPLE_CAP: usize = 1000;

/// Draws a point pair on conjugate epipolar lines of `f`, an affinity from
/// the two-parameter family compatible with `f` at that pair, and feature
/// orientations/scales transported through the affinity.
pub fn make_consistent_sift<R: Rng + ?Sized>(f: &FundamentalMatrix, rng: &mut R) -> Result<ConsistentSift> {
    let p1 = ImagePoint::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    make_consistent_sift_at(f, p1, rng)
}

/// As [`make_consistent_sift`] starting from a given first-image point;
/// draws a fresh point whenever the current one is too close to the epipole.
pub fn make_consistent_sift_at<R: Rng + ?Sized>(
    f: &FundamentalMatrix,
    p1: ImagePoint,
    rng: &mut R,
) -> Result<ConsistentSift> {
    let fm = f.matrix() / f.matrix().norm();
    let mut p1 = p1;
    for _ in 0..RESAMPLE_CAP {
        let l2 = fm * p1.homogeneous();
        let n2 = Vector2::new(l2.x, l2.y);
        if n2.norm() < 1e-6 {
            p1 = ImagePoint::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            continue;
        }
        let step = rng.random_range(-1.0..1.0);
        let foot = -l2.z / n2.norm_squared();
        let p2 = ImagePoint::new(foot * n2.x - n2.y * step, foot * n2.y + n2.x * step);
        let l1 = fm.transpose() * p2.homogeneous();
        let n1 = Vector2::new(l1.x, l1.y);
        if n1.norm() < 1e-6 {
            p1 = ImagePoint::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            continue;
        }

        return consistent_feature_pair(&fm, p1, p2, rng);
    }
    Err(Error::ResampleCapExceeded(RESAMPLE_CAP))
}

/// Samples an affinity compatible with `f` at the fixed pair `(p1, p2)` and
/// transports a random feature through it.
pub(crate) fn consistent_feature_pair<R: Rng + ?Sized>(
    f: &Matrix3<f64>,
    p1: ImagePoint,
    p2: ImagePoint,
    rng: &mut R,
) -> Result<ConsistentSift> {
    let fm = f / f.norm();
    let l2 = fm * p1.homogeneous();
    let n2 = Vector2::new(l2.x, l2.y);
    let l1 = fm.transpose() * p2.homogeneous();
    let n1 = Vector2::new(l1.x, l1.y);
    if n2.norm() < 1e-12 || n1.norm() < 1e-12 {
        return Err(Error::DegenerateConfiguration);
    }
    // Aᵀ n2 = −n1: least-norm solution plus the two-dimensional null space
    let nn = n2.norm_squared();
    let particular = [-n1.x * n2.x / nn, -n1.y * n2.x / nn, -n1.x * n2.y / nn, -n1.y * n2.y / nn];
    let unit = n2 / n2.norm();
    let null1 = [unit.y, 0.0, -unit.x, 0.0];
    let null2 = [0.0, unit.y, 0.0, -unit.x];
    let spread = n1.norm() / n2.norm();
    for _ in 0..RESAMPLE_CAP {
        let (k1, k2): (f64, f64) = (rng.random_range(-spread..spread), rng.random_range(-spread..spread));
        let a: [f64; 4] = std::array::from_fn(|i| particular[i] + k1 * null1[i] + k2 * null2[i]);
        let am = Matrix2::new(a[0], a[1], a[2], a[3]);
        if am.determinant() <= 1e-9 * spread * spread {
            continue;
        }
        let Some(alpha1) = sample_consistent_orientation(&am, rng) else {
            continue;
        };
        let q1 = rng.random_range(1.0..5.0);
        let transfer = sift_from_affine(&am, alpha1, q1)?;
        let first = SiftFeature::new(p1, alpha1, q1)?;
        let second = SiftFeature::new(p2, transfer.alpha2, transfer.q2)?;
        return Ok(ConsistentSift {
            correspondence: SiftCorrespondence::new(first, second),
            affine: AffineCorrespondence::new(p1, p2, a),
        });
    }
    Err(Error::ResampleCapExceeded(RESAMPLE_CAP))
}
