//! Uncalibrated solvers: 4-SIFT and 7PT share the rank-2 pencil step, 8PT
//! is the linear least-squares baseline.

use nalgebra::Matrix3;

use super::roots::real_cubic_roots;
use super::{
    check_features, check_sample_size, conditioning, hartley_transform, null_space, Normalizer, PointPair,
    SolverOutput,
};
use crate::constraints::{epipolar_row, sift_row, CoefficientSystem, RowKind};
use crate::error::{Error, Result};
use crate::geometry::{from_row_major, FundamentalMatrix, ImagePoint, SiftCorrespondence};

/// Which three of the four correspondences contribute an orientation/scale
/// row to the 4-SIFT system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SiftRowSubset {
    /// The first three in input order.
    #[default]
    FirstThree,
    /// The triple giving the best-conditioned 7×9 system.
    BestConditioned,
}

fn normalizers(p1: &[ImagePoint], p2: &[ImagePoint]) -> Result<(Normalizer, Normalizer)> {
    let t1 = hartley_transform(p1).ok_or(Error::DegenerateSample("coincident points"))?;
    let t2 = hartley_transform(p2).ok_or(Error::DegenerateSample("coincident points"))?;
    Ok((t1, t2))
}

fn denormalize(f: &Matrix3<f64>, t1: &Normalizer, t2: &Normalizer) -> Matrix3<f64> {
    t2.matrix().transpose() * f * t1.matrix()
}

/// Rank-2 members of the pencil spanned by a two-dimensional null space.
///
/// With `F(λ) = F2 + λ (F1 − F2)` the determinant is the cubic
/// `det A + λ tr(adj(A) B) + λ² tr(adj(B) A) + λ³ det B`. A vanishing leading
/// coefficient means the root at infinity, i.e. `B` itself, is a solution.
fn rank2_pencil(basis: &[[f64; 9]]) -> Vec<Matrix3<f64>> {
    let f1 = from_row_major(&basis[0]);
    let f2 = from_row_major(&basis[1]);
    let a = f2;
    let b = f1 - f2;
    let c0 = a.determinant();
    let c1 = (adjugate(&a) * b).trace();
    let c2 = (adjugate(&b) * a).trace();
    let c3 = b.determinant();
    let scale = c0.abs().max(c1.abs()).max(c2.abs()).max(c3.abs());
    let mut models: Vec<Matrix3<f64>> = real_cubic_roots(c3, c2, c1, c0).into_iter().map(|l| a + b * l).collect();
    if scale > 0.0 && c3.abs() <= 1e-14 * scale {
        models.push(b);
    }
    models
}

fn adjugate(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
    Matrix3::new(
        c(1, 2, 1, 2),
        -c(0, 2, 1, 2),
        c(0, 1, 1, 2),
        -c(1, 2, 0, 2),
        c(0, 2, 0, 2),
        -c(0, 1, 0, 2),
        c(1, 2, 0, 1),
        -c(0, 2, 0, 1),
        c(0, 1, 0, 1),
    )
}

fn finish(models: Vec<Matrix3<f64>>, system: &CoefficientSystem, null_space_dim: usize) -> SolverOutput<FundamentalMatrix> {
    let models: Vec<FundamentalMatrix> = models
        .into_iter()
        .filter(|m| m.iter().all(|x| x.is_finite()) && m.norm() > 0.0)
        .map(FundamentalMatrix::new)
        .collect();
    let residuals = models.iter().map(|m| system.max_residual(m.matrix())).collect();
    SolverOutput {
        models,
        null_space_dim,
        residuals,
    }
}

/// Fundamental matrix from four covariant-feature correspondences: four
/// epipolar rows and three orientation/scale rows leave a pencil whose rank-2
/// members are the solutions.
pub fn solve_f_4sift(sample: &[SiftCorrespondence]) -> Result<SolverOutput<FundamentalMatrix>> {
    solve_f_4sift_with(sample, SiftRowSubset::FirstThree)
}

pub fn solve_f_4sift_with(sample: &[SiftCorrespondence], subset: SiftRowSubset) -> Result<SolverOutput<FundamentalMatrix>> {
    check_sample_size(sample.len(), 4)?;
    check_features(sample)?;
    let p1: Vec<ImagePoint> = sample.iter().map(|c| c.first.point).collect();
    let p2: Vec<ImagePoint> = sample.iter().map(|c| c.second.point).collect();
    let (t1, t2) = normalizers(&p1, &p2)?;

    let normalized: Vec<SiftCorrespondence> = sample
        .iter()
        .map(|c| SiftCorrespondence::new(t1.apply_feature(&c.first), t2.apply_feature(&c.second)))
        .collect();
    let epi: Vec<[f64; 9]> = normalized.iter().map(|c| epipolar_row(&c.first.point, &c.second.point).0).collect();
    let sift: Vec<[f64; 9]> = normalized.iter().map(|c| sift_row(c).map(|r| r.0)).collect::<Result<_>>()?;

    let triple = match subset {
        SiftRowSubset::FirstThree => [0, 1, 2],
        SiftRowSubset::BestConditioned => {
            let triples = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
            let mut best = (f64::NEG_INFINITY, triples[0]);
            for t in triples {
                let rows: Vec<[f64; 9]> = epi.iter().copied().chain(t.iter().map(|&i| sift[i])).collect();
                let c = conditioning(&rows);
                if c > best.0 {
                    best = (c, t);
                }
            }
            best.1
        }
    };
    let rows: Vec<[f64; 9]> = epi.iter().copied().chain(triple.iter().map(|&i| sift[i])).collect();
    let basis = null_space(&rows, 2)?;
    let models = rank2_pencil(&basis).iter().map(|f| denormalize(f, &t1, &t2)).collect();

    let mut system = CoefficientSystem::new();
    for c in sample {
        system.push(epipolar_row(&c.first.point, &c.second.point), RowKind::Epipolar);
    }
    for &i in &triple {
        system.push(sift_row(&sample[i])?, RowKind::Sift);
    }
    Ok(finish(models, &system, 2))
}

fn point_system(pairs: &[PointPair]) -> CoefficientSystem {
    let mut system = CoefficientSystem::new();
    for (p1, p2) in pairs {
        system.push(epipolar_row(p1, p2), RowKind::Epipolar);
    }
    system
}

fn check_points(pairs: &[PointPair]) -> Result<()> {
    if pairs.iter().all(|(a, b)| a.is_finite() && b.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("image point"))
    }
}

/// Classical seven-point solver.
pub fn solve_f_7pt(pairs: &[PointPair]) -> Result<SolverOutput<FundamentalMatrix>> {
    check_sample_size(pairs.len(), 7)?;
    check_points(pairs)?;
    let p1: Vec<ImagePoint> = pairs.iter().map(|p| p.0).collect();
    let p2: Vec<ImagePoint> = pairs.iter().map(|p| p.1).collect();
    let (t1, t2) = normalizers(&p1, &p2)?;
    let rows: Vec<[f64; 9]> = pairs.iter().map(|(a, b)| epipolar_row(&t1.apply(a), &t2.apply(b)).0).collect();
    let basis = null_space(&rows, 2)?;
    let models = rank2_pencil(&basis).iter().map(|f| denormalize(f, &t1, &t2)).collect();
    Ok(finish(models, &point_system(pairs), 2))
}

/// Normalized eight-point algorithm on at least eight pairs, with rank-2
/// truncation.
pub fn solve_f_8pt(pairs: &[PointPair]) -> Result<FundamentalMatrix> {
    solve_f_8pt_weighted(pairs, &vec![1.0; pairs.len()])
}

/// Eight-point algorithm with each epipolar row multiplied by its weight;
/// pairs with zero weight are ignored.
pub fn solve_f_8pt_weighted(pairs: &[PointPair], weights: &[f64]) -> Result<FundamentalMatrix> {
    if weights.len() != pairs.len() {
        return Err(Error::WrongSampleSize {
            expected: pairs.len(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::NonFinite("weight"));
    }
    let used: Vec<(PointPair, f64)> = pairs.iter().copied().zip(weights.iter().copied()).filter(|(_, w)| *w > 0.0).collect();
    if used.len() < 8 {
        return Err(Error::WrongSampleSize {
            expected: 8,
            got: used.len(),
        });
    }
    let pairs_used: Vec<PointPair> = used.iter().map(|u| u.0).collect();
    check_points(&pairs_used)?;
    let p1: Vec<ImagePoint> = pairs_used.iter().map(|p| p.0).collect();
    let p2: Vec<ImagePoint> = pairs_used.iter().map(|p| p.1).collect();
    let (t1, t2) = normalizers(&p1, &p2)?;
    let rows: Vec<[f64; 9]> = used
        .iter()
        .map(|((a, b), w)| {
            let r = epipolar_row(&t1.apply(a), &t2.apply(b)).0;
            r.map(|x| x * w)
        })
        .collect();
    let f = from_row_major(&null_space(&rows, 1)?[0]);
    let f = FundamentalMatrix::new(f).rank2_projected();
    Ok(FundamentalMatrix::new(denormalize(f.matrix(), &t1, &t2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{calibrated_scene, Scene};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn best_distance(out: &SolverOutput<FundamentalMatrix>, gt: &FundamentalMatrix) -> f64 {
        out.models.iter().map(|m| m.distance(gt)).fold(f64::INFINITY, f64::min)
    }

    fn check_postconditions(out: &SolverOutput<FundamentalMatrix>) {
        assert!(!out.is_empty() && out.len() <= 3);
        for (m, r) in out.models.iter().zip(&out.residuals) {
            let unit = m.matrix() / m.matrix().norm();
            assert!(unit.determinant().abs() < 1e-10, "det {}", unit.determinant());
            assert!(*r < 1e-10, "residual {r}");
        }
    }

    #[test]
    fn four_sift_recovers_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let scene: Scene = calibrated_scene(&mut rng, 4);
            for subset in [SiftRowSubset::FirstThree, SiftRowSubset::BestConditioned] {
                let out = solve_f_4sift_with(&scene.features, subset).unwrap();
                check_postconditions(&out);
                assert!(best_distance(&out, &scene.fundamental) < 1e-8, "{}", best_distance(&out, &scene.fundamental));
            }
        }
    }

    #[test]
    fn seven_point_recovers_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let scene = calibrated_scene(&mut rng, 7);
            let out = solve_f_7pt(&scene.pairs()).unwrap();
            check_postconditions(&out);
            assert!(best_distance(&out, &scene.fundamental) < 1e-8);
        }
    }

    #[test]
    fn both_minimal_solvers_agree_on_one_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = calibrated_scene(&mut rng, 7);
        let a = solve_f_4sift(&scene.features[..4]).unwrap();
        let b = solve_f_7pt(&scene.pairs()).unwrap();
        assert!(best_distance(&a, &scene.fundamental) < 1e-8);
        assert!(best_distance(&b, &scene.fundamental) < 1e-8);
    }

    #[test]
    fn duplicate_correspondence_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scene = calibrated_scene(&mut rng, 4);
        let mut s = scene.features.clone();
        s[1] = s[0];
        assert!(matches!(solve_f_4sift(&s), Err(Error::DegenerateSample(_))));
        let mut s = scene.features.clone();
        s[3] = s[2];
        assert!(matches!(solve_f_4sift(&s), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn wrong_sample_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = calibrated_scene(&mut rng, 8);
        assert!(matches!(solve_f_4sift(&scene.features[..3]), Err(Error::WrongSampleSize { expected: 4, got: 3 })));
        assert!(matches!(solve_f_7pt(&scene.pairs()[..6]), Err(Error::WrongSampleSize { .. })));
        assert!(matches!(solve_f_8pt(&scene.pairs()[..7]), Err(Error::WrongSampleSize { .. })));
    }

    #[test]
    fn eight_point_noise_free_and_collinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scene = calibrated_scene(&mut rng, 8);
        let f = solve_f_8pt(&scene.pairs()).unwrap();
        assert!(f.distance(&scene.fundamental) < 1e-8);

        let line: Vec<PointPair> = (0..8)
            .map(|i| {
                let s = i as f64;
                (ImagePoint::new(10.0 + s, 20.0 + 2.0 * s), ImagePoint::new(5.0 - s, 7.0 + 0.5 * s))
            })
            .collect();
        assert!(matches!(solve_f_8pt(&line), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn eight_point_beats_its_worst_subset() {
        use crate::geometry::symmetric_epipolar_error;
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scene = calibrated_scene(&mut rng, 12);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let noisy: Vec<PointPair> = scene
            .pairs()
            .iter()
            .map(|(a, b)| {
                (
                    ImagePoint::new(a.u + noise.sample(&mut rng), a.v + noise.sample(&mut rng)),
                    ImagePoint::new(b.u + noise.sample(&mut rng), b.v + noise.sample(&mut rng)),
                )
            })
            .collect();
        let error = |f: &FundamentalMatrix| -> f64 {
            scene.pairs().iter().map(|(a, b)| symmetric_epipolar_error(f.matrix(), a, b)).sum::<f64>()
        };
        let full = error(&solve_f_8pt(&noisy).unwrap());
        let mut worst = 0.0f64;
        let n = noisy.len();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() != 8 {
                continue;
            }
            let subset: Vec<PointPair> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| noisy[i]).collect();
            if let Ok(f) = solve_f_8pt(&subset) {
                worst = worst.max(error(&f));
            }
        }
        assert!(full < worst, "{full} vs {worst}");
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let scene = calibrated_scene(&mut rng, 7);
        let (du, dv) = (37.5, -12.25);
        let shift = |p: &ImagePoint| ImagePoint::new(p.u + du, p.v + dv);
        let moved: Vec<PointPair> = scene.pairs().iter().map(|(a, b)| (shift(a), shift(b))).collect();
        let a = solve_f_7pt(&scene.pairs()).unwrap();
        let b = solve_f_7pt(&moved).unwrap();
        let tinv = Matrix3::new(1.0, 0.0, -du, 0.0, 1.0, -dv, 0.0, 0.0, 1.0);
        for m in &a.models {
            let expected = FundamentalMatrix::new(tinv.transpose() * m.matrix() * tinv);
            let d = b.models.iter().map(|x| x.distance(&expected)).fold(f64::INFINITY, f64::min);
            assert!(d < 1e-8, "{d}");
        }
    }
}
