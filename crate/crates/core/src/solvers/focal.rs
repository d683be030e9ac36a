//! Semi-calibrated solvers (unknown common focal length, known principal
//! point). The SIFT and point variants only differ in how the six linear rows
//! are produced; both feed one polynomial eigenvalue back-end.
//!
//! With `F = x N1 + y N2 + N3` and `w = 1/f²`, the nine entries of
//! `2 F Q Fᵀ Q F − tr(F Q Fᵀ Q) F` with `Q = diag(1, 1, w)` and `det F`
//! give ten equations that are cubic in `(x, y)` and quadratic in `w`:
//! `(M0 + w M1 + w² M2) m(x, y) = 0` over ten monomials `m`.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector};

use super::poly::{det, linear_combination, mat_mul, transpose, Poly, PolyMat};
use super::roots::real_eigenvalues;
use super::{check_features, check_sample_size, null_space, Normalizer, PointPair, SolverOutput};
use crate::constraints::{epipolar_row, sift_row, CoefficientSystem, RowKind};
use crate::error::{Error, Result};
use crate::geometry::{from_row_major, FundamentalMatrix, ImagePoint, SiftCorrespondence};

/// Upper bound on the number of real solutions.
pub const MAX_FOCAL_SOLUTIONS: usize = 15;

/// Residual above which a candidate root is discarded as spurious.
const ACCEPT_RESIDUAL: f64 = 1e-10;

/// Exponents `(i, j)` of `xⁱ yʲ` for the monomial vector.
const MONOMIALS: [(usize, usize); 10] =
    [(3, 0), (2, 1), (1, 2), (0, 3), (2, 0), (1, 1), (0, 2), (1, 0), (0, 1), (0, 0)];

/// Shifts `w → c + t` tried in turn until the constant term of the shifted
/// pencil is well conditioned.
const SHIFTS: [f64; 4] = [0.7321, -0.3517, 2.1131, 0.0913];

/// A fundamental matrix in pixel coordinates with the focal length, in
/// pixels, of the two cameras.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalModel {
    pub fundamental: FundamentalMatrix,
    pub focal: f64,
}

/// Six linear rows in a principal-point-centred, isotropically scaled frame,
/// plus the same rows in pixel coordinates for residual reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalRows {
    rows: Vec<[f64; 9]>,
    system: CoefficientSystem,
    normalizer: Normalizer,
}

impl FocalRows {
    fn normalizer(points: &[ImagePoint], principal_point: &ImagePoint) -> Result<Normalizer> {
        if !principal_point.is_finite() {
            return Err(Error::NonFinite("principal point"));
        }
        // isotropic scaling about the principal point keeps K = diag(f, f, 1)
        let mean = points.iter().map(|p| p.distance(principal_point)).sum::<f64>() / points.len() as f64;
        if !(mean > 0.0) || !mean.is_finite() {
            return Err(Error::DegenerateSample("coincident points"));
        }
        Ok(Normalizer {
            cx: principal_point.u,
            cy: principal_point.v,
            scale: std::f64::consts::SQRT_2 / mean,
        })
    }

    /// Three epipolar and three orientation/scale rows.
    pub fn from_sift(sample: &[SiftCorrespondence], principal_point: &ImagePoint) -> Result<Self> {
        check_sample_size(sample.len(), 3)?;
        check_features(sample)?;
        let points: Vec<ImagePoint> = sample.iter().flat_map(|c| [c.first.point, c.second.point]).collect();
        let t = Self::normalizer(&points, principal_point)?;
        let mut rows = Vec::with_capacity(6);
        let mut system = CoefficientSystem::new();
        for c in sample {
            rows.push(epipolar_row(&t.apply(&c.first.point), &t.apply(&c.second.point)).0);
            system.push(epipolar_row(&c.first.point, &c.second.point), RowKind::Epipolar);
        }
        for c in sample {
            let n = SiftCorrespondence::new(t.apply_feature(&c.first), t.apply_feature(&c.second));
            rows.push(sift_row(&n)?.0);
            system.push(sift_row(c)?, RowKind::Sift);
        }
        Ok(Self {
            rows,
            system,
            normalizer: t,
        })
    }

    /// Six epipolar rows.
    pub fn from_points(pairs: &[PointPair], principal_point: &ImagePoint) -> Result<Self> {
        check_sample_size(pairs.len(), 6)?;
        if !pairs.iter().all(|(a, b)| a.is_finite() && b.is_finite()) {
            return Err(Error::NonFinite("image point"));
        }
        let points: Vec<ImagePoint> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
        let t = Self::normalizer(&points, principal_point)?;
        let mut system = CoefficientSystem::new();
        let rows = pairs
            .iter()
            .map(|(a, b)| {
                system.push(epipolar_row(a, b), RowKind::Epipolar);
                epipolar_row(&t.apply(a), &t.apply(b)).0
            })
            .collect();
        Ok(Self {
            rows,
            system,
            normalizer: t,
        })
    }

    pub fn rows(&self) -> &[[f64; 9]] {
        &self.rows
    }

    /// Pixel-coordinate rows.
    pub fn system(&self) -> &CoefficientSystem {
        &self.system
    }
}

/// Multiplies the third column by `w`.
fn times_q_right(m: &PolyMat) -> PolyMat {
    std::array::from_fn(|i| std::array::from_fn(|j| if j == 2 { m[i][j].shift_z() } else { m[i][j] }))
}

/// The ten equations in `(x, y, w)`, each scaled to unit largest coefficient.
fn focal_equations(basis: &[[f64; 9]]) -> [Poly; 10] {
    let zero = [0.0; 9];
    let f = linear_combination(&basis[0], &basis[1], &zero, &basis[2]);
    let fq = times_q_right(&f);
    let fqftq = times_q_right(&mat_mul(&fq, &transpose(&f)));
    let tr = fqftq[0][0] + fqftq[1][1] + fqftq[2][2];
    let cubic = mat_mul(&fqftq, &f);
    let d = det(&f);
    std::array::from_fn(|n| {
        let p = if n < 9 {
            let (i, j) = (n / 3, n % 3);
            cubic[i][j].scale(2.0) - tr * f[i][j]
        } else {
            d
        };
        let mut largest = 0.0f64;
        for &(i, j) in &MONOMIALS {
            for k in 0..3 {
                largest = largest.max(p.coeff(i, j, k).abs());
            }
        }
        if largest > 0.0 {
            p.scale(1.0 / largest)
        } else {
            p
        }
    })
}

/// Invariant-based residual of a normalized-frame candidate: `|det F|` and
/// the trace constraint of `K F K`, both on unit-norm matrices.
fn normalized_residual(f: &Matrix3<f64>, w: f64) -> f64 {
    let f = f / f.norm();
    let fl = 1.0 / w.sqrt();
    let k = Matrix3::new(fl, 0.0, 0.0, 0.0, fl, 0.0, 0.0, 0.0, 1.0);
    let e = k * f * k;
    let e = e / e.norm();
    let eet = e * e.transpose();
    let trace = (2.0 * eet * e - eet.trace() * e).norm();
    f.determinant().abs().max(trace)
}

/// Frobenius norm of the trace constraint of `Kᵀ F K` (unit norm) for a
/// pixel-coordinate `F`, with `K` built from `focal` and the principal point.
pub fn focal_trace_residual(f: &FundamentalMatrix, focal: f64, principal_point: &ImagePoint) -> f64 {
    let k = Matrix3::new(focal, 0.0, principal_point.u, 0.0, focal, principal_point.v, 0.0, 0.0, 1.0);
    let e = k.transpose() * f.matrix() * k;
    let e = e / e.norm();
    let eet = e * e.transpose();
    (2.0 * eet * e - eet.trace() * e).norm()
}

fn coefficient_matrices(polys: &[Poly; 10]) -> [SMatrix<f64, 10, 10>; 3] {
    std::array::from_fn(|k| {
        SMatrix::<f64, 10, 10>::from_fn(|r, c| {
            let (i, j) = MONOMIALS[c];
            polys[r].coeff(i, j, k)
        })
    })
}

/// Real roots `w` of `det(M0 + w M1 + w² M2) = 0`, via the companion
/// linearization in `μ = 1 / (w − c)`, which tolerates singular `M2`.
fn pencil_roots(m: &[SMatrix<f64, 10, 10>; 3]) -> Vec<f64> {
    for c in SHIFTS {
        let p0 = m[0] + m[1] * c + m[2] * (c * c);
        let p1 = m[1] + m[2] * (2.0 * c);
        let p2 = m[2];
        let sv = p0.singular_values();
        if !(sv.min() > 1e-11 * sv.max()) {
            continue;
        }
        let Some(inv) = p0.try_inverse() else { continue };
        let a = -(inv * p2);
        let b = -(inv * p1);
        let mut comp = DMatrix::<f64>::zeros(20, 20);
        for i in 0..10 {
            comp[(i, 10 + i)] = 1.0;
            for j in 0..10 {
                comp[(10 + i, j)] = a[(i, j)];
                comp[(10 + i, 10 + j)] = b[(i, j)];
            }
        }
        return real_eigenvalues(&comp, 1e-6)
            .into_iter()
            .filter(|mu| mu.abs() > 1e-300)
            .map(|mu| c + 1.0 / mu)
            .filter(|w| w.is_finite())
            .collect();
    }
    Vec::new()
}

fn null_vector(m: &[SMatrix<f64, 10, 10>; 3], w: f64) -> Option<(f64, f64)> {
    let mw = m[0] + m[1] * w + m[2] * (w * w);
    let svd = mw.svd(false, true);
    let vt = svd.v_t?;
    let k = svd.singular_values.imin();
    let v = vt.row(k);
    if v[9].abs() < 1e-12 * v.amax() {
        return None;
    }
    Some((v[7] / v[9], v[8] / v[9]))
}

/// Gauss-Newton on the ten equations; keeps a step only if it lowers the
/// residual norm.
fn polish(polys: &[Poly; 10], mut s: [f64; 3]) -> [f64; 3] {
    let norm = |s: &[f64; 3]| polys.iter().map(|p| p.eval(s[0], s[1], s[2]).powi(2)).sum::<f64>();
    let mut current = norm(&s);
    for _ in 0..5 {
        let r = SVector::<f64, 10>::from_fn(|i, _| polys[i].eval(s[0], s[1], s[2]));
        let j = SMatrix::<f64, 10, 3>::from_fn(|i, k| polys[i].gradient(s[0], s[1], s[2])[k]);
        let Ok(step) = j.svd(true, true).solve(&r, 1e-14) else { break };
        let next = [s[0] - step[0], s[1] - step[1], s[2] - step[2]];
        let n = norm(&next);
        if !(n < current) {
            break;
        }
        s = next;
        current = n;
        if current == 0.0 {
            break;
        }
    }
    s
}

/// Shared back-end of the semi-calibrated solvers.
pub fn solve_focal_rows(input: &FocalRows) -> Result<SolverOutput<FocalModel>> {
    let basis = null_space(&input.rows, 3)?;
    let polys = focal_equations(&basis);
    let m = coefficient_matrices(&polys);

    let mut candidates: Vec<(f64, Matrix3<f64>, f64)> = Vec::new();
    for w in pencil_roots(&m) {
        if !(w > 0.0) {
            continue;
        }
        let Some((x, y)) = null_vector(&m, w) else { continue };
        let [x, y, w] = polish(&polys, [x, y, w]);
        if !(w > 0.0) || !x.is_finite() || !y.is_finite() {
            continue;
        }
        let f = from_row_major(&std::array::from_fn::<f64, 9, _>(|i| x * basis[0][i] + y * basis[1][i] + basis[2][i]));
        let r = normalized_residual(&f, w);
        if r < ACCEPT_RESIDUAL {
            candidates.push((r, f, w));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));

    let t = input.normalizer.matrix();
    let mut models: Vec<FocalModel> = Vec::new();
    let mut kept: Vec<(Matrix3<f64>, f64)> = Vec::new();
    for (_, f, w) in candidates {
        let unit = f / f.norm();
        let duplicate = kept.iter().any(|(g, v)| {
            (v - w).abs() <= 1e-8 * w.max(*v) && ((g - unit).amax() < 1e-8 || (g + unit).amax() < 1e-8)
        });
        if duplicate {
            continue;
        }
        kept.push((unit, w));
        let focal = 1.0 / (input.normalizer.scale * w.sqrt());
        models.push(FocalModel {
            fundamental: FundamentalMatrix::new(t.transpose() * f * t),
            focal,
        });
        if models.len() == MAX_FOCAL_SOLUTIONS {
            break;
        }
    }
    if models.is_empty() {
        return Err(Error::NoValidFocal);
    }
    let residuals = models.iter().map(|m| input.system.max_residual(m.fundamental.matrix())).collect();
    Ok(SolverOutput {
        models,
        null_space_dim: 3,
        residuals,
    })
}

/// Fundamental matrix and common focal length from three covariant-feature
/// correspondences.
pub fn solve_f_focal_3sift(sample: &[SiftCorrespondence], principal_point: &ImagePoint) -> Result<SolverOutput<FocalModel>> {
    solve_focal_rows(&FocalRows::from_sift(sample, principal_point)?)
}

/// Six-point baseline for the same problem.
pub fn solve_f_focal_6pt(pairs: &[PointPair], principal_point: &ImagePoint) -> Result<SolverOutput<FocalModel>> {
    solve_focal_rows(&FocalRows::from_points(pairs, principal_point)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::relative_focal_error;
    use crate::testing::calibrated_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check(out: &SolverOutput<FocalModel>, gt: &FundamentalMatrix, focal: f64, pp: &ImagePoint) {
        assert!(!out.is_empty() && out.len() <= MAX_FOCAL_SOLUTIONS);
        for (m, r) in out.models.iter().zip(&out.residuals) {
            assert!(m.focal > 0.0);
            assert!(*r < 1e-10, "row residual {r}");
            let unit = m.fundamental.matrix() / m.fundamental.matrix().norm();
            assert!(unit.determinant().abs() < 1e-10);
            let t = focal_trace_residual(&m.fundamental, m.focal, pp);
            assert!(t < 1e-8, "trace residual {t} focal {}", m.focal);
        }
        let best = out
            .models
            .iter()
            .min_by(|a, b| {
                relative_focal_error(a.focal, focal).unwrap().total_cmp(&relative_focal_error(b.focal, focal).unwrap())
            })
            .unwrap();
        assert!(relative_focal_error(best.focal, focal).unwrap() < 1e-6, "{} vs {focal}", best.focal);
        assert!(best.fundamental.distance(gt) < 1e-6);
    }

    #[test]
    fn three_sift_recovers_focal() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let scene = calibrated_scene(&mut rng, 3);
            let pp = ImagePoint::new(scene.k1.cx, scene.k1.cy);
            let out = solve_f_focal_3sift(&scene.features, &pp).unwrap();
            check(&out, &scene.fundamental, scene.k1.fx, &pp);
        }
    }

    #[test]
    fn six_point_recovers_focal() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let scene = calibrated_scene(&mut rng, 6);
            let pp = ImagePoint::new(scene.k1.cx, scene.k1.cy);
            let out = solve_f_focal_6pt(&scene.pairs(), &pp).unwrap();
            check(&out, &scene.fundamental, scene.k1.fx, &pp);
        }
    }

    #[test]
    fn shared_back_end_parity() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let scene = calibrated_scene(&mut rng, 3);
        let pp = ImagePoint::new(500.0, 500.0);
        let rows = FocalRows::from_sift(&scene.features, &pp).unwrap();
        assert_eq!(solve_focal_rows(&rows).unwrap(), solve_f_focal_3sift(&scene.features, &pp).unwrap());
    }

    #[test]
    fn degenerate_and_wrong_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let scene = calibrated_scene(&mut rng, 6);
        let pp = ImagePoint::new(500.0, 500.0);
        let mut s = scene.features[..3].to_vec();
        s[1] = s[0];
        assert!(matches!(solve_f_focal_3sift(&s, &pp), Err(Error::DegenerateSample(_))));
        assert!(matches!(solve_f_focal_6pt(&scene.pairs()[..5], &pp), Err(Error::WrongSampleSize { .. })));
    }
}
