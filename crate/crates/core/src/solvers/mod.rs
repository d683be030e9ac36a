//! Minimal and non-minimal two-view solvers.
//!
//! Feature-based solvers stack one epipolar row and one orientation/scale
//! row per correspondence and therefore need roughly half as many matches as
//! their point-based counterparts, which are provided as baselines.

mod essential;
mod focal;
mod fundamental;
pub(crate) mod poly;
pub(crate) mod roots;

use nalgebra::{DMatrix, Matrix3, SMatrix, SVD};

use crate::error::{Error, Result};
use crate::geometry::{
    CameraIntrinsics, EssentialMatrix, FundamentalMatrix, ImagePoint, SiftCorrespondence, SiftFeature,
};

pub use essential::{essential_solver_state, solve_e_3sift, solve_e_5pt, EssentialSolverState};
pub use focal::{
    focal_trace_residual, solve_f_focal_3sift, solve_f_focal_6pt, solve_focal_rows, FocalModel, FocalRows,
};
pub use fundamental::{solve_f_4sift, solve_f_4sift_with, solve_f_7pt, solve_f_8pt, solve_f_8pt_weighted, SiftRowSubset};

/// Identifier of a minimal solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SolverKind {
    /// Fundamental matrix from four covariant features.
    F4Sift,
    /// Fundamental matrix from seven points.
    F7pt,
    /// Essential matrix from three covariant features.
    E3Sift,
    /// Essential matrix from five points.
    E5pt,
    /// Fundamental matrix and focal length from three covariant features.
    FF3Sift,
    /// Fundamental matrix and focal length from six points.
    FF6pt,
}

impl SolverKind {
    pub const ALL: [SolverKind; 6] = [Self::F4Sift, Self::F7pt, Self::E3Sift, Self::E5pt, Self::FF3Sift, Self::FF6pt];

    pub fn id(&self) -> &'static str {
        match self {
            Self::F4Sift => "f4sift",
            Self::F7pt => "f7pt",
            Self::E3Sift => "e3sift",
            Self::E5pt => "e5pt",
            Self::FF3Sift => "ff3sift",
            Self::FF6pt => "ff6pt",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == id)
    }

    pub fn sample_size(&self) -> usize {
        match self {
            Self::F4Sift => 4,
            Self::F7pt => 7,
            Self::E3Sift | Self::FF3Sift => 3,
            Self::E5pt => 5,
            Self::FF6pt => 6,
        }
    }

    pub fn uses_features(&self) -> bool {
        matches!(self, Self::F4Sift | Self::E3Sift | Self::FF3Sift)
    }

    /// The solver for the same model from the other family.
    pub fn counterpart(&self) -> Self {
        match self {
            Self::F4Sift => Self::F7pt,
            Self::F7pt => Self::F4Sift,
            Self::E3Sift => Self::E5pt,
            Self::E5pt => Self::E3Sift,
            Self::FF3Sift => Self::FF6pt,
            Self::FF6pt => Self::FF3Sift,
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// A model returned by [`solve_minimal`], always expressed as a pixel
/// fundamental matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimalModel {
    pub fundamental: FundamentalMatrix,
    /// Calibrated essential matrix, for the essential solvers.
    pub essential: Option<EssentialMatrix>,
    /// Shared focal length in pixels, for the focal solvers.
    pub focal: Option<f64>,
}

/// Runs a minimal solver on a sample of feature correspondences. The point
/// solvers only read the feature locations. `k1` and `k2` are used by the
/// essential solvers; the focal solvers take the principal point from `k1`.
pub fn solve_minimal(
    kind: SolverKind,
    sample: &[SiftCorrespondence],
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Result<Vec<MinimalModel>> {
    check_sample_size(sample.len(), kind.sample_size())?;
    let pairs: Vec<PointPair> = sample.iter().map(|c| c.points()).collect();
    let plain = |f: FundamentalMatrix| MinimalModel {
        fundamental: f,
        essential: None,
        focal: None,
    };
    let from_essential = |e: EssentialMatrix| -> Result<MinimalModel> {
        Ok(MinimalModel {
            fundamental: e.to_fundamental(k1, k2)?,
            essential: Some(e),
            focal: None,
        })
    };
    let from_focal = |m: FocalModel| MinimalModel {
        fundamental: m.fundamental,
        essential: None,
        focal: Some(m.focal),
    };
    let pp = ImagePoint::new(k1.cx, k1.cy);
    match kind {
        SolverKind::F4Sift => Ok(solve_f_4sift(sample)?.models.into_iter().map(plain).collect()),
        SolverKind::F7pt => Ok(solve_f_7pt(&pairs)?.models.into_iter().map(plain).collect()),
        SolverKind::E3Sift => solve_e_3sift(sample, k1, k2)?.models.into_iter().map(from_essential).collect(),
        SolverKind::E5pt => solve_e_5pt(&pairs, k1, k2)?.models.into_iter().map(from_essential).collect(),
        SolverKind::FF3Sift => Ok(solve_f_focal_3sift(sample, &pp)?.models.into_iter().map(from_focal).collect()),
        SolverKind::FF6pt => Ok(solve_f_focal_6pt(&pairs, &pp)?.models.into_iter().map(from_focal).collect()),
    }
}

/// Ratio below which a singular value counts as zero when checking a
/// stacked system for unexpected rank loss.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Models returned by a solver together with numerical diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOutput<M> {
    pub models: Vec<M>,
    /// Dimension of the null space the solver parameterized.
    pub null_space_dim: usize,
    /// Largest normalized residual of the input rows, per model.
    pub residuals: Vec<f64>,
}

impl<M> SolverOutput<M> {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Point pair shorthand used by the point-based solvers.
pub type PointPair = (ImagePoint, ImagePoint);

/// Isotropic similarity moving the centroid to the origin and the mean
/// distance to `√2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
}

impl Normalizer {
    pub fn apply(&self, p: &ImagePoint) -> ImagePoint {
        ImagePoint::new((p.u - self.cx) * self.scale, (p.v - self.cy) * self.scale)
    }

    /// Transported feature: the orientation is unchanged, the scale follows
    /// the isotropic zoom.
    pub fn apply_feature(&self, f: &SiftFeature) -> SiftFeature {
        SiftFeature {
            point: self.apply(&f.point),
            angle: f.angle,
            scale: f.scale * self.scale,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let s = self.scale;
        Matrix3::new(s, 0.0, -s * self.cx, 0.0, s, -s * self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        let s = 1.0 / self.scale;
        Matrix3::new(s, 0.0, self.cx, 0.0, s, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Hartley conditioning transform for a point set, `None` if all points
/// coincide.
pub fn hartley_transform(points: &[ImagePoint]) -> Option<Normalizer> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.u).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.v).sum::<f64>() / n;
    let mean = points.iter().map(|p| (p.u - cx).hypot(p.v - cy)).sum::<f64>() / n;
    if !(mean > 1e-12 * (1.0 + cx.abs() + cy.abs())) || !mean.is_finite() {
        return None;
    }
    Some(Normalizer {
        cx,
        cy,
        scale: std::f64::consts::SQRT_2 / mean,
    })
}

/// Right singular vectors of the `dim` smallest singular values of a
/// 9-column system, after checking that the remaining `9 − dim` singular
/// values are numerically non-zero.
pub fn null_space(rows: &[[f64; 9]], dim: usize) -> Result<Vec<[f64; 9]>> {
    let (sigma, vt): (Vec<f64>, Vec<[f64; 9]>) = if rows.len() <= 9 {
        let mut m = SMatrix::<f64, 9, 9>::zeros();
        for (i, r) in rows.iter().enumerate() {
            for (j, x) in r.iter().enumerate() {
                m[(i, j)] = *x;
            }
        }
        let svd = SVD::new(m, false, true);
        let vt = svd.v_t.ok_or(Error::DegenerateSample("svd failed"))?;
        (
            svd.singular_values.iter().copied().collect(),
            (0..9).map(|i| std::array::from_fn(|j| vt[(i, j)])).collect(),
        )
    } else {
        let m = DMatrix::from_fn(rows.len(), 9, |i, j| rows[i][j]);
        let svd = SVD::new(m, false, true);
        let vt = svd.v_t.ok_or(Error::DegenerateSample("svd failed"))?;
        (
            svd.singular_values.iter().copied().collect(),
            (0..9).map(|i| std::array::from_fn(|j| vt[(i, j)])).collect(),
        )
    };
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("coefficient system"));
    }
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let rank = 9 - dim;
    if rows.len() < rank {
        return Err(Error::WrongSampleSize {
            expected: rank,
            got: rows.len(),
        });
    }
    let largest = sigma[order[0]];
    if largest == 0.0 || sigma[order[rank - 1]] < RANK_TOLERANCE * largest {
        return Err(Error::DegenerateSample("rank-deficient coefficient system"));
    }
    Ok(order[rank..].iter().map(|&i| vt[i]).collect())
}

/// `σ_min / σ_max` over the leading `rank` singular values, used to compare
/// the conditioning of alternative row subsets.
pub(crate) fn conditioning(rows: &[[f64; 9]]) -> f64 {
    let mut m = SMatrix::<f64, 9, 9>::zeros();
    for (i, r) in rows.iter().enumerate().take(9) {
        for (j, x) in r.iter().enumerate() {
            m[(i, j)] = *x;
        }
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let k = rows.len().min(9);
    if s[0] == 0.0 {
        0.0
    } else {
        s[k - 1] / s[0]
    }
}

pub(crate) fn check_sample_size(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        Err(Error::WrongSampleSize { expected, got })
    } else {
        Ok(())
    }
}

pub(crate) fn check_features(sample: &[SiftCorrespondence]) -> Result<()> {
    for c in sample {
        for s in [c.first.scale, c.second.scale] {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidScale(s));
            }
        }
    }
    Ok(())
}
