//! Calibrated solvers: 3-SIFT (single solution through a linearized
//! monomial system) and the classical five-point baseline.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector2};

use super::poly::{det, linear_combination, trace_constraint, Poly};
use super::roots::real_eigenpairs;
use super::{check_features, check_sample_size, null_space, PointPair, SolverOutput};
use crate::constraints::{epipolar_row, sift_row, CoefficientSystem, RowKind};
use crate::error::{Error, Result};
use crate::geometry::{
    from_row_major, vector_angle, CameraIntrinsics, EssentialMatrix, ImagePoint, SiftCorrespondence, SiftFeature,
};

/// Ratio `σ_min / σ_max` of `Q` below which the linearized system counts as
/// ill-conditioned.
const Q_CONDITION_LIMIT: f64 = 1e-12;

/// Intermediate quantities of the 3-SIFT essential matrix solver.
///
/// `E = α N1 + β N2 + γ N3` with `γ = 1`; the ten cubic constraints in
/// `(α, β)` are linearized over the monomials
/// `y = [α³, β³, α²β, αβ², α², β², αβ, α, β]` as `Q y = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EssentialSolverState {
    pub n1: [f64; 9],
    pub n2: [f64; 9],
    pub n3: [f64; 9],
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub y: [f64; 9],
    pub q: SMatrix<f64, 10, 9>,
    pub b: SVector<f64, 10>,
}

/// Exponents `(i, j)` of `αⁱ βʲ` for each entry of `y`.
const MONOMIALS: [(usize, usize); 9] = [(3, 0), (0, 3), (2, 1), (1, 2), (2, 0), (0, 2), (1, 1), (1, 0), (0, 1)];

fn ten_constraints(e: &[[Poly; 3]; 3]) -> [Poly; 10] {
    let t = trace_constraint(e);
    let d = det(e);
    std::array::from_fn(|i| if i < 9 { t[i] } else { d })
}

fn combine(n1: &[f64; 9], n2: &[f64; 9], n3: &[f64; 9], a: f64, b: f64, c: f64) -> Matrix3<f64> {
    from_row_major(&std::array::from_fn::<f64, 9, _>(|i| a * n1[i] + b * n2[i] + c * n3[i]))
}

fn trace_residual(e: &Matrix3<f64>) -> f64 {
    let e = e / e.norm();
    let eet = e * e.transpose();
    (2.0 * eet * e - eet.trace() * e).norm()
}

impl EssentialSolverState {
    /// Runs the solver on six rows (three epipolar, three orientation/scale)
    /// expressed in calibrated coordinates.
    pub fn from_rows(rows: &[[f64; 9]]) -> Result<Self> {
        check_sample_size(rows.len(), 6)?;
        let basis = null_space(rows, 3)?;
        let (n1, n2, n3) = (basis[0], basis[1], basis[2]);
        let zero = [0.0; 9];
        let e = linear_combination(&n1, &n2, &zero, &n3);
        let polys = ten_constraints(&e);

        let mut q = SMatrix::<f64, 10, 9>::zeros();
        let mut b = SVector::<f64, 10>::zeros();
        for (r, p) in polys.iter().enumerate() {
            for (c, &(i, j)) in MONOMIALS.iter().enumerate() {
                q[(r, c)] = p.coeff(i, j, 0);
            }
            b[r] = -p.coeff(0, 0, 0);
        }
        let svd = q.svd(true, true);
        let sigma = &svd.singular_values;
        let (smax, smin) = (sigma.max(), sigma.min());
        if !(smax > 0.0) || smin < Q_CONDITION_LIMIT * smax {
            return Err(Error::IllConditioned("monomial system"));
        }
        let sol = svd.solve(&b, 0.0).map_err(|_| Error::IllConditioned("monomial system"))?;
        let y: [f64; 9] = std::array::from_fn(|i| sol[i]);

        let alphas = [y[7], y[0].cbrt(), y[6] / y[8], y[4] / y[7]];
        let betas = [y[8], y[1].cbrt(), y[6] / y[7], y[5] / y[8]];
        let mut best: Option<(f64, f64, f64)> = None;
        for &a in alphas.iter().filter(|a| a.is_finite()) {
            for &bt in betas.iter().filter(|b| b.is_finite()) {
                let r = trace_residual(&combine(&n1, &n2, &n3, a, bt, 1.0));
                if r.is_finite() && best.is_none_or(|(br, _, _)| r < br) {
                    best = Some((r, a, bt));
                }
            }
        }
        let (_, alpha, beta) = best.ok_or(Error::IllConditioned("no finite monomial ratio"))?;
        Ok(Self {
            n1,
            n2,
            n3,
            alpha,
            beta,
            gamma: 1.0,
            y,
            q,
            b,
        })
    }

    pub fn essential(&self) -> Matrix3<f64> {
        combine(&self.n1, &self.n2, &self.n3, self.alpha, self.beta, self.gamma)
    }

    /// `(|y₈³ − y₁|, |y₉³ − y₂|)` relative to the magnitude of the cubes.
    pub fn monomial_consistency(&self) -> (f64, f64) {
        let rel = |lin: f64, cube: f64| (lin.powi(3) - cube).abs() / cube.abs().max(1.0);
        (rel(self.y[7], self.y[0]), rel(self.y[8], self.y[1]))
    }
}

/// Maps a pixel feature into calibrated coordinates: the point through
/// `K⁻¹`, the scaled orientation vector through the linear part of `K⁻¹`.
fn calibrate_feature(f: &SiftFeature, k: &CameraIntrinsics) -> Result<SiftFeature> {
    let ki = k.inverse()?;
    let l = k.inverse_linear()?;
    let x = ki * f.point.homogeneous();
    let v = l * (f.direction() * f.scale);
    let v = Vector2::new(v.x, v.y);
    SiftFeature::new(ImagePoint::new(x.x / x.z, x.y / x.z), vector_angle(&v), v.norm())
}

fn calibrated_system(sample: &[SiftCorrespondence], k1: &CameraIntrinsics, k2: &CameraIntrinsics) -> Result<CoefficientSystem> {
    let mut system = CoefficientSystem::new();
    let calibrated: Vec<SiftCorrespondence> = sample
        .iter()
        .map(|c| Ok(SiftCorrespondence::new(calibrate_feature(&c.first, k1)?, calibrate_feature(&c.second, k2)?)))
        .collect::<Result<_>>()?;
    for c in &calibrated {
        system.push(epipolar_row(&c.first.point, &c.second.point), RowKind::Epipolar);
    }
    for c in &calibrated {
        system.push(sift_row(c)?, RowKind::Sift);
    }
    Ok(system)
}

/// Intermediate state of [`solve_e_3sift`] for inspection.
pub fn essential_solver_state(
    sample: &[SiftCorrespondence],
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Result<EssentialSolverState> {
    check_sample_size(sample.len(), 3)?;
    check_features(sample)?;
    let system = calibrated_system(sample, k1, k2)?;
    let rows: Vec<[f64; 9]> = system.rows().iter().map(|r| r.0).collect();
    EssentialSolverState::from_rows(&rows)
}

/// Essential matrix from three covariant-feature correspondences. Returns a
/// single model in calibrated coordinates, projected onto singular values
/// `(1, 1, 0)`.
pub fn solve_e_3sift(
    sample: &[SiftCorrespondence],
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> Result<SolverOutput<EssentialMatrix>> {
    check_sample_size(sample.len(), 3)?;
    check_features(sample)?;
    let system = calibrated_system(sample, k1, k2)?;
    let rows: Vec<[f64; 9]> = system.rows().iter().map(|r| r.0).collect();
    let state = EssentialSolverState::from_rows(&rows)?;
    let e = state.essential();
    if !e.iter().all(|x| x.is_finite()) || e.norm() == 0.0 {
        return Err(Error::IllConditioned("non-finite essential matrix"));
    }
    let model = EssentialMatrix::new(e).projected();
    Ok(SolverOutput {
        residuals: vec![system.max_residual(model.matrix())],
        models: vec![model],
        null_space_dim: 3,
    })
}

/// Column of each cubic monomial `xⁱ yʲ zᵏ` in the 5PT elimination template;
/// the remaining ten columns form the quotient basis.
const CUBICS: [(usize, usize, usize); 10] = [
    (3, 0, 0),
    (2, 1, 0),
    (1, 2, 0),
    (0, 3, 0),
    (2, 0, 1),
    (1, 1, 1),
    (0, 2, 1),
    (1, 0, 2),
    (0, 1, 2),
    (0, 0, 3),
];
const BASIS: [(usize, usize, usize); 10] = [
    (2, 0, 0),
    (1, 1, 0),
    (0, 2, 0),
    (1, 0, 1),
    (0, 1, 1),
    (0, 0, 2),
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (0, 0, 0),
];

/// Where `x · BASIS[i]` lands: a cubic (template row) or another basis entry.
enum Product {
    Cubic(usize),
    Basis(usize),
}

const TIMES_X: [Product; 10] = [
    Product::Cubic(0),
    Product::Cubic(1),
    Product::Cubic(2),
    Product::Cubic(4),
    Product::Cubic(5),
    Product::Cubic(7),
    Product::Basis(0),
    Product::Basis(1),
    Product::Basis(3),
    Product::Basis(6),
];

/// Classical five-point solver (action matrix on the quotient basis of the
/// ten cubic constraints). Models are returned in calibrated coordinates.
pub fn solve_e_5pt(pairs: &[PointPair], k1: &CameraIntrinsics, k2: &CameraIntrinsics) -> Result<SolverOutput<EssentialMatrix>> {
    check_sample_size(pairs.len(), 5)?;
    if !pairs.iter().all(|(a, b)| a.is_finite() && b.is_finite()) {
        return Err(Error::NonFinite("image point"));
    }
    let ki1 = k1.inverse()?;
    let ki2 = k2.inverse()?;
    let calibrate = |k: &Matrix3<f64>, p: &ImagePoint| {
        let x = k * p.homogeneous();
        ImagePoint::new(x.x / x.z, x.y / x.z)
    };
    let mut system = CoefficientSystem::new();
    for (a, b) in pairs {
        system.push(epipolar_row(&calibrate(&ki1, a), &calibrate(&ki2, b)), RowKind::Epipolar);
    }
    let rows: Vec<[f64; 9]> = system.rows().iter().map(|r| r.0).collect();
    let basis = null_space(&rows, 4)?;
    let (x, y, z, w) = (&basis[0], &basis[1], &basis[2], &basis[3]);
    let e = linear_combination(x, y, z, w);
    let polys = ten_constraints(&e);

    let mut cubic = SMatrix::<f64, 10, 10>::zeros();
    let mut rest = SMatrix::<f64, 10, 10>::zeros();
    for (r, p) in polys.iter().enumerate() {
        for (c, &(i, j, k)) in CUBICS.iter().enumerate() {
            cubic[(r, c)] = p.coeff(i, j, k);
        }
        for (c, &(i, j, k)) in BASIS.iter().enumerate() {
            rest[(r, c)] = p.coeff(i, j, k);
        }
    }
    let lu = cubic.lu();
    let reduced = lu.solve(&rest).ok_or(Error::DegenerateSample("singular elimination template"))?;
    if !reduced.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateSample("singular elimination template"));
    }

    let mut action = DMatrix::<f64>::zeros(10, 10);
    for (i, prod) in TIMES_X.iter().enumerate() {
        match *prod {
            Product::Cubic(c) => {
                for j in 0..10 {
                    action[(i, j)] = -reduced[(c, j)];
                }
            }
            Product::Basis(j) => action[(i, j)] = 1.0,
        }
    }

    let mut models = Vec::new();
    for (_, v) in real_eigenpairs(&action, 1e-8) {
        if v[9].abs() < 1e-12 * v.amax() {
            continue;
        }
        let (a, b, c) = (v[6] / v[9], v[7] / v[9], v[8] / v[9]);
        let m = from_row_major(&std::array::from_fn::<f64, 9, _>(|i| a * x[i] + b * y[i] + c * z[i] + w[i]));
        if m.iter().all(|v| v.is_finite()) && m.norm() > 0.0 {
            models.push(EssentialMatrix::new(m));
        }
    }
    let residuals = models.iter().map(|m| system.max_residual(m.matrix())).collect();
    Ok(SolverOutput {
        models,
        null_space_dim: 4,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{decompose_essential, rotation_error, translation_error};
    use crate::testing::calibrated_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_sift_recovers_ground_truth_and_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let scene = calibrated_scene(&mut rng, 3);
            let out = solve_e_3sift(&scene.features, &scene.k1, &scene.k2).unwrap();
            assert_eq!(out.len(), 1);
            let e = &out.models[0];
            assert!(e.distance(&scene.essential) < 1e-6, "{}", e.distance(&scene.essential));
            assert!(e.trace_residual() < 1e-8);
            let unit = e.matrix() / e.matrix().norm();
            assert!(unit.determinant().abs() < 1e-10);
            assert!(out.residuals[0] < 1e-10);
            let pose = decompose_essential(e, &scene.pairs(), &scene.k1, &scene.k2).unwrap();
            assert!(rotation_error(&pose.rotation, &scene.pose.rotation) < 1e-4);
            assert!(translation_error(&pose.translation, &scene.pose.translation).unwrap() < 1e-4);
        }
    }

    #[test]
    fn monomials_are_consistent_at_the_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let scene = calibrated_scene(&mut rng, 3);
            let state = essential_solver_state(&scene.features, &scene.k1, &scene.k2).unwrap();
            let (a, b) = state.monomial_consistency();
            assert!(a < 1e-6 && b < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn three_sift_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let scene = calibrated_scene(&mut rng, 3);
        let a = solve_e_3sift(&scene.features, &scene.k1, &scene.k2).unwrap();
        let b = solve_e_3sift(&scene.features, &scene.k1, &scene.k2).unwrap();
        assert_eq!(a.models[0].to_row_major().map(f64::to_bits), b.models[0].to_row_major().map(f64::to_bits));
    }

    #[test]
    fn three_sift_rejects_degenerate_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let scene = calibrated_scene(&mut rng, 3);
        let mut s = scene.features.clone();
        s[2] = s[1];
        assert!(matches!(solve_e_3sift(&s, &scene.k1, &scene.k2), Err(Error::DegenerateSample(_))));
        assert!(matches!(
            solve_e_3sift(&scene.features[..2], &scene.k1, &scene.k2),
            Err(Error::WrongSampleSize { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn five_point_recovers_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..200 {
            let scene = calibrated_scene(&mut rng, 5);
            let out = solve_e_5pt(&scene.pairs(), &scene.k1, &scene.k2).unwrap();
            assert!(!out.is_empty() && out.len() <= 10);
            for (m, r) in out.models.iter().zip(&out.residuals) {
                assert!(*r < 1e-10, "{r}");
                assert!(m.trace_residual() < 1e-8, "{}", m.trace_residual());
            }
            let best = out.models.iter().map(|m| m.distance(&scene.essential)).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "{best}");
        }
    }
}
