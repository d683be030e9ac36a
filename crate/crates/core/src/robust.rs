//! Locally optimized RANSAC with MSAC scoring and adaptive termination.
//!
//! Estimation problems plug in through [`Problem`]: a minimal solver, a
//! residual in the scoring frame and a weighted non-minimal refit used by
//! the local optimization. Scoring only looks at point coordinates.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    decompose_essential, skew, symmetric_epipolar_error, CameraIntrinsics, EssentialMatrix, FundamentalMatrix, ImagePoint,
    RelativePose, SiftCorrespondence,
};
use crate::solvers::{
    solve_e_3sift, solve_e_5pt, solve_f_4sift_with, solve_f_7pt, solve_f_8pt_weighted, solve_f_focal_3sift,
    solve_f_focal_6pt, FocalModel, MinimalModel, PointPair, SiftRowSubset, SolverKind,
};

/// The local optimization refits on every point within this many
/// thresholds of the current model. Collecting only the inliers makes the
/// refit favour the points that already agree with the model.
pub const LO_SUPPORT_MULTIPLIER: f64 = 3.0;

/// Maximum number of reweighting rounds in the local optimization.
pub const LO_MAX_ROUNDS: usize = 10;

/// Minimum inlier count for the non-minimal refit.
pub const LO_MIN_INLIERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Probability `η` of having drawn at least one all-inlier sample.
    pub confidence: f64,
    pub max_iterations: usize,
    /// Inlier threshold `τ` in pixels.
    pub threshold: f64,
    pub lo_enabled: bool,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            confidence: 0.99,
            max_iterations: 5000,
            threshold: 0.75,
            lo_enabled: true,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidConfig("confidence must lie in (0, 1)"));
        }
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::InvalidConfig("threshold must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be positive"));
        }
        Ok(())
    }
}

/// Outcome of a robust estimation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacReport<M> {
    /// `None` when every sample was degenerate or failed to solve.
    pub model: Option<M>,
    /// Indices with residual strictly below the threshold, ascending.
    pub inliers: Vec<usize>,
    /// Main-loop iterations (samples drawn).
    pub iterations: usize,
    /// Hypotheses scored, including local-optimization refits.
    pub models_scored: usize,
    pub lo_rounds: usize,
    pub wall_time: f64,
    pub score: f64,
}

impl<M> RansacReport<M> {
    pub fn is_success(&self) -> bool {
        self.model.is_some()
    }
}

/// An estimation problem over `len()` correspondences.
pub trait Problem {
    type Model: Clone;

    fn sample_size(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Pixel coordinates of correspondence `i`.
    fn pair(&self, i: usize) -> PointPair;
    /// Residual of correspondence `i` in the scoring frame.
    fn residual(&self, model: &Self::Model, i: usize) -> f64;
    /// Factor turning the pixel threshold into the scoring frame.
    fn threshold_scale(&self) -> f64 {
        1.0
    }
    fn is_sample_degenerate(&self, sample: &[usize]) -> bool;
    fn fit_minimal(&self, sample: &[usize]) -> Vec<Self::Model>;
    /// Weighted non-minimal fit seeded by `current`.
    fn fit_nonminimal(&self, current: &Self::Model, inliers: &[usize]) -> Option<Self::Model>;
}

/// Number of iterations needed to reach confidence `η` with inlier ratio
/// `ε` and sample size `m`: `⌈log(1−η) / log(1−εᵐ)⌉`, at least one.
pub fn required_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64) -> f64 {
    let p = inlier_ratio.clamp(0.0, 1.0).powi(sample_size as i32);
    if p >= 1.0 {
        return 1.0;
    }
    if p <= 0.0 {
        return f64::INFINITY;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil();
    n.max(1.0)
}

/// Truncated quadratic score `Σ min(eᵢ², τ²)` with inliers `eᵢ < τ`.
pub fn score_msac(residuals: impl IntoIterator<Item = f64>, threshold: f64) -> (f64, Vec<usize>) {
    let t2 = threshold * threshold;
    let mut score = 0.0;
    let mut inliers = Vec::new();
    for (i, e) in residuals.into_iter().enumerate() {
        if e < threshold {
            score += e * e;
            inliers.push(i);
        } else {
            score += t2;
        }
    }
    (score, inliers)
}

fn score_model<P: Problem>(problem: &P, model: &P::Model, threshold: f64) -> (f64, Vec<usize>) {
    score_msac((0..problem.len()).map(|i| problem.residual(model, i)), threshold)
}

/// Result of [`local_optimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOptimization<M> {
    pub model: M,
    pub inliers: Vec<usize>,
    pub score: f64,
    pub rounds: usize,
    /// Score after each accepted round, starting with the input model.
    pub history: Vec<f64>,
    /// Set when there were too few inliers to refit.
    pub insufficient_inliers: bool,
}

/// Iteratively reweighted least squares: refit on the support set (the
/// points within [`LO_SUPPORT_MULTIPLIER`] thresholds), re-collect the
/// support, and stop after [`LO_MAX_ROUNDS`], at a fixpoint of the support,
/// or when the score at the threshold would get worse. `threshold` is in
/// pixels.
pub fn local_optimize<P: Problem>(problem: &P, model: &P::Model, threshold: f64) -> LocalOptimization<P::Model> {
    let tau = threshold * problem.threshold_scale();
    let support_of = |m: &P::Model| -> Vec<usize> {
        let wide = LO_SUPPORT_MULTIPLIER * tau;
        (0..problem.len()).filter(|&i| problem.residual(m, i) < wide).collect()
    };
    let (score, inliers) = score_model(problem, model, tau);
    let mut best = LocalOptimization {
        model: model.clone(),
        inliers,
        score,
        rounds: 0,
        history: vec![score],
        insufficient_inliers: false,
    };
    let mut support = support_of(model);
    if support.len() < LO_MIN_INLIERS {
        best.insufficient_inliers = true;
        return best;
    }
    for _ in 0..LO_MAX_ROUNDS {
        let Some(candidate) = problem.fit_nonminimal(&best.model, &support) else { break };
        best.rounds += 1;
        let (score, inliers) = score_model(problem, &candidate, tau);
        if score > best.score {
            break;
        }
        let next = support_of(&candidate);
        let fixpoint = next == support;
        best.model = candidate;
        best.score = score;
        best.inliers = inliers;
        best.history.push(score);
        support = next;
        if fixpoint || support.len() < LO_MIN_INLIERS {
            break;
        }
    }
    best
}

/// Uniform sampling without replacement, scoring of every returned model,
/// local optimization of each new best and adaptive termination.
pub fn ransac<P: Problem>(problem: &P, config: &RansacConfig) -> Result<RansacReport<P::Model>> {
    config.validate()?;
    let m = problem.sample_size();
    let n = problem.len();
    if n < m {
        return Err(Error::WrongSampleSize { expected: m, got: n });
    }
    let start = Instant::now();
    let tau = config.threshold * problem.threshold_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut best: Option<(f64, P::Model, Vec<usize>)> = None;
    let mut iterations = 0;
    let mut models_scored = 0;
    let mut lo_rounds = 0;
    let mut required = config.max_iterations as f64;

    while (iterations as f64) < required.min(config.max_iterations as f64) {
        iterations += 1;
        let sample = rand::seq::index::sample(&mut rng, n, m).into_vec();
        if problem.is_sample_degenerate(&sample) {
            continue;
        }
        for model in problem.fit_minimal(&sample) {
            models_scored += 1;
            let (score, inliers) = score_model(problem, &model, tau);
            if best.as_ref().is_some_and(|b| score >= b.0) {
                continue;
            }
            let mut candidate = (score, model, inliers);
            if config.lo_enabled {
                let lo = local_optimize(problem, &candidate.1, config.threshold);
                models_scored += lo.rounds;
                lo_rounds += lo.rounds;
                if lo.score <= candidate.0 {
                    candidate = (lo.score, lo.model, lo.inliers);
                }
            }
            let ratio = candidate.2.len() as f64 / n as f64;
            required = required_iterations(ratio, m, config.confidence);
            best = Some(candidate);
        }
    }

    let wall_time = start.elapsed().as_secs_f64();
    Ok(match best {
        Some((score, model, inliers)) => RansacReport {
            model: Some(model),
            inliers,
            iterations,
            models_scored,
            lo_rounds,
            wall_time,
            score,
        },
        None => RansacReport {
            model: None,
            inliers: Vec::new(),
            iterations,
            models_scored,
            lo_rounds,
            wall_time,
            score: f64::INFINITY,
        },
    })
}

/// Which geometric model a sample is meant for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Fundamental,
    Essential,
    FundamentalFocal,
}

/// Minimum separation, in pixels, between two sample points in one image.
pub const MIN_POINT_SEPARATION: f64 = 1.0;

fn collinear(points: &[ImagePoint]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let n = points.len() as f64;
    let cu = points.iter().map(|p| p.u).sum::<f64>() / n;
    let cv = points.iter().map(|p| p.v).sum::<f64>() / n;
    let (mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0);
    for p in points {
        let (du, dv) = (p.u - cu, p.v - cv);
        suu += du * du;
        svv += dv * dv;
        suv += du * dv;
    }
    // eigenvalues of the 2×2 scatter matrix
    let mean = 0.5 * (suu + svv);
    let radius = (0.5 * (suu - svv)).hypot(suv);
    let (large, small) = (mean + radius, (mean - radius).max(0.0));
    small <= 1e-12 * large
}

/// `true` if the sample passes: no two points closer than
/// [`MIN_POINT_SEPARATION`] in either image and, for models containing a
/// fundamental matrix, not all points collinear in either image.
pub fn degeneracy_check(sample: &[PointPair], kind: ProblemKind) -> bool {
    for (i, a) in sample.iter().enumerate() {
        for b in &sample[i + 1..] {
            if a.0.distance(&b.0) < MIN_POINT_SEPARATION || a.1.distance(&b.1) < MIN_POINT_SEPARATION {
                return false;
            }
        }
    }
    if kind != ProblemKind::Essential {
        let p1: Vec<ImagePoint> = sample.iter().map(|p| p.0).collect();
        let p2: Vec<ImagePoint> = sample.iter().map(|p| p.1).collect();
        if collinear(&p1) || collinear(&p2) {
            return false;
        }
    }
    true
}

/// First-order (Sampson) normalization weight of a pair under `f`.
fn sampson_weight(f: &Matrix3<f64>, p: &PointPair) -> f64 {
    let l2 = f * p.0.homogeneous();
    let l1 = f.transpose() * p.1.homogeneous();
    let g = (l2.x * l2.x + l2.y * l2.y + l1.x * l1.x + l1.y * l1.y).sqrt();
    if g > 0.0 && g.is_finite() {
        1.0 / g
    } else {
        0.0
    }
}

fn weighted_eight_point(pairs: &[PointPair], f: &Matrix3<f64>) -> Option<FundamentalMatrix> {
    let mut weights: Vec<f64> = pairs.iter().map(|p| sampson_weight(f, p)).collect();
    let largest = weights.iter().cloned().fold(0.0, f64::max);
    if !(largest > 0.0) {
        return None;
    }
    weights.iter_mut().for_each(|w| *w /= largest);
    solve_f_8pt_weighted(pairs, &weights).ok()
}

/// Iteration cap of the essential matrix refinement.
const REFINE_ITERATIONS: usize = 10;

/// Rotation and unit translation with `E ∝ [t]ₓ R`.
fn factor_essential(e: &Matrix3<f64>) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let svd = SVD::new(*e, true, true);
    let mut u = svd.u?;
    let mut vt = svd.v_t?;
    // the smallest singular value must sit last for the factorization
    let order = {
        let mut idx = [0, 1, 2];
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        idx
    };
    let u_sorted = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let vt_sorted = Matrix3::from_rows(&[vt.row(order[0]), vt.row(order[1]), vt.row(order[2])]);
    u = u_sorted;
    vt = vt_sorted;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    Some((u * w * vt, u.column(2).into_owned()))
}

/// Signed Sampson residuals of `S⁻¹ [t]ₓ R S⁻¹` with `S = diag(s, s, 1)`
/// on calibrated pairs.
fn sampson_residuals(r: &Matrix3<f64>, t: &Vector3<f64>, s: f64, pairs: &[PointPair]) -> DVector<f64> {
    let si = Matrix3::from_diagonal(&Vector3::new(1.0 / s, 1.0 / s, 1.0));
    let e = si * skew(t) * r * si;
    DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|(a, b)| {
            let (x1, x2) = (a.homogeneous(), b.homogeneous());
            let l2 = e * x1;
            let l1 = e.transpose() * x2;
            let g = (l2.x * l2.x + l2.y * l2.y + l1.x * l1.x + l1.y * l1.y).sqrt();
            if g > 0.0 {
                x2.dot(&l2) / g
            } else {
                0.0
            }
        }),
    )
}

/// Levenberg-Marquardt on the Sampson error over the essential manifold,
/// starting from `e`. The rotation is updated by left multiplication with
/// `exp([ω]ₓ)`, the translation within the tangent plane of the sphere.
/// With `free_scale` a common focal scale `s` of both calibrations is
/// refined as well (as `log s`). Returns the refined essential matrix in
/// the rescaled calibration and `s`.
fn refine_essential(e: &EssentialMatrix, pairs: &[PointPair], free_scale: bool) -> Option<(EssentialMatrix, f64)> {
    const STEP: f64 = 1e-7;
    let params = if free_scale { 6 } else { 5 };
    if pairs.len() < params {
        return None;
    }
    let (mut r, mut t) = factor_essential(e.matrix())?;
    let mut s = 1.0;
    let mut res = sampson_residuals(&r, &t, s, pairs);
    let mut cost = res.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..REFINE_ITERATIONS {
        let b1 = t.cross(&if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() }).normalize();
        let b2 = t.cross(&b1);
        let apply = |d: &[f64]| {
            let rot = Rotation3::from_scaled_axis(Vector3::new(d[0], d[1], d[2]));
            let scale = if free_scale { s * d[5].exp() } else { s };
            (rot.matrix() * r, (t + b1 * d[3] + b2 * d[4]).normalize(), scale)
        };
        let mut j = DMatrix::zeros(pairs.len(), params);
        for k in 0..params {
            let mut d = [0.0; 6];
            d[k] = STEP;
            let (rk, tk, sk) = apply(&d);
            j.set_column(k, &((sampson_residuals(&rk, &tk, sk, pairs) - &res) / STEP));
        }
        let jtj = j.tr_mul(&j);
        let g = j.tr_mul(&res);
        let mut improved = false;
        while lambda < 1e10 {
            let mut a = jtj.clone();
            for k in 0..params {
                a[(k, k)] += lambda * (jtj[(k, k)] + 1e-12);
            }
            let Some(delta) = a.lu().solve(&(-&g)) else { break };
            let mut d = [0.0; 6];
            d[..params].copy_from_slice(delta.as_slice());
            let (rn, tn, sn) = apply(&d);
            let rn_res = sampson_residuals(&rn, &tn, sn, pairs);
            let c = rn_res.norm_squared();
            if c < cost {
                let gain = (cost - c) / cost.max(f64::MIN_POSITIVE);
                (r, t, s, res, cost) = (rn, tn, sn, rn_res, c);
                lambda = (lambda * 0.1).max(1e-12);
                improved = gain > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (s > 0.0 && s.is_finite()).then(|| (EssentialMatrix::new(skew(&t) * r), s))
}

fn gather<T: Copy>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i]).collect()
}

/// Fundamental matrix from covariant features with the 4-SIFT solver.
#[derive(Debug, Clone)]
pub struct SiftFundamentalProblem {
    pub correspondences: Vec<SiftCorrespondence>,
    pub subset: SiftRowSubset,
    pairs: Vec<PointPair>,
}

impl SiftFundamentalProblem {
    pub fn new(correspondences: Vec<SiftCorrespondence>) -> Self {
        let pairs = correspondences.iter().map(|c| c.points()).collect();
        Self {
            correspondences,
            subset: SiftRowSubset::FirstThree,
            pairs,
        }
    }
}

/// Fundamental matrix from point pairs with the seven-point solver.
#[derive(Debug, Clone)]
pub struct PointFundamentalProblem {
    pub pairs: Vec<PointPair>,
}

impl PointFundamentalProblem {
    pub fn new(pairs: Vec<PointPair>) -> Self {
        Self { pairs }
    }
}

macro_rules! fundamental_common {
    () => {
        type Model = FundamentalMatrix;

        fn len(&self) -> usize {
            self.pairs.len()
        }

        fn pair(&self, i: usize) -> PointPair {
            self.pairs[i]
        }

        fn residual(&self, model: &FundamentalMatrix, i: usize) -> f64 {
            let (a, b) = &self.pairs[i];
            symmetric_epipolar_error(model.matrix(), a, b)
        }

        fn is_sample_degenerate(&self, sample: &[usize]) -> bool {
            !degeneracy_check(&gather(&self.pairs, sample), ProblemKind::Fundamental)
        }

        fn fit_nonminimal(&self, current: &FundamentalMatrix, inliers: &[usize]) -> Option<FundamentalMatrix> {
            weighted_eight_point(&gather(&self.pairs, inliers), current.matrix())
        }
    };
}

impl Problem for SiftFundamentalProblem {
    fundamental_common!();

    fn sample_size(&self) -> usize {
        4
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<FundamentalMatrix> {
        solve_f_4sift_with(&gather(&self.correspondences, sample), self.subset)
            .map(|o| o.models)
            .unwrap_or_default()
    }
}

impl Problem for PointFundamentalProblem {
    fundamental_common!();

    fn sample_size(&self) -> usize {
        7
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<FundamentalMatrix> {
        solve_f_7pt(&gather(&self.pairs, sample)).map(|o| o.models).unwrap_or_default()
    }
}

/// Calibrated data shared by the essential matrix problems: pixel pairs for
/// the samplers, calibrated pairs for scoring and refitting.
#[derive(Debug, Clone)]
struct Calibrated {
    k1: CameraIntrinsics,
    k2: CameraIntrinsics,
    pairs: Vec<PointPair>,
    calibrated: Vec<PointPair>,
}

impl Calibrated {
    fn new(pairs: Vec<PointPair>, k1: CameraIntrinsics, k2: CameraIntrinsics) -> Result<Self> {
        let ki1 = k1.inverse()?;
        let ki2 = k2.inverse()?;
        let apply = |k: &Matrix3<f64>, p: &ImagePoint| {
            let x = k * p.homogeneous();
            ImagePoint::new(x.x / x.z, x.y / x.z)
        };
        let calibrated = pairs.iter().map(|(a, b)| (apply(&ki1, a), apply(&ki2, b))).collect();
        Ok(Self {
            k1,
            k2,
            pairs,
            calibrated,
        })
    }

    fn threshold_scale(&self) -> f64 {
        4.0 / (self.k1.fx + self.k1.fy + self.k2.fx + self.k2.fy)
    }

    fn residual(&self, e: &EssentialMatrix, i: usize) -> f64 {
        let (a, b) = &self.calibrated[i];
        symmetric_epipolar_error(e.matrix(), a, b)
    }

    fn refit(&self, e: &EssentialMatrix, inliers: &[usize]) -> Option<EssentialMatrix> {
        refine_essential(e, &gather(&self.calibrated, inliers), false).map(|(e, _)| e)
    }
}

/// Essential matrix from covariant features with the 3-SIFT solver.
#[derive(Debug, Clone)]
pub struct SiftEssentialProblem {
    pub correspondences: Vec<SiftCorrespondence>,
    data: Calibrated,
}

impl SiftEssentialProblem {
    pub fn new(correspondences: Vec<SiftCorrespondence>, k1: CameraIntrinsics, k2: CameraIntrinsics) -> Result<Self> {
        let pairs = correspondences.iter().map(|c| c.points()).collect();
        Ok(Self {
            correspondences,
            data: Calibrated::new(pairs, k1, k2)?,
        })
    }
}

/// Essential matrix from point pairs with the five-point solver.
#[derive(Debug, Clone)]
pub struct PointEssentialProblem {
    data: Calibrated,
}

impl PointEssentialProblem {
    pub fn new(pairs: Vec<PointPair>, k1: CameraIntrinsics, k2: CameraIntrinsics) -> Result<Self> {
        Ok(Self {
            data: Calibrated::new(pairs, k1, k2)?,
        })
    }
}

macro_rules! essential_common {
    () => {
        type Model = EssentialMatrix;

        fn len(&self) -> usize {
            self.data.pairs.len()
        }

        fn pair(&self, i: usize) -> PointPair {
            self.data.pairs[i]
        }

        fn residual(&self, model: &EssentialMatrix, i: usize) -> f64 {
            self.data.residual(model, i)
        }

        fn threshold_scale(&self) -> f64 {
            self.data.threshold_scale()
        }

        fn is_sample_degenerate(&self, sample: &[usize]) -> bool {
            !degeneracy_check(&gather(&self.data.pairs, sample), ProblemKind::Essential)
        }

        fn fit_nonminimal(&self, current: &EssentialMatrix, inliers: &[usize]) -> Option<EssentialMatrix> {
            self.data.refit(current, inliers)
        }
    };
}

impl Problem for SiftEssentialProblem {
    essential_common!();

    fn sample_size(&self) -> usize {
        3
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<EssentialMatrix> {
        solve_e_3sift(&gather(&self.correspondences, sample), &self.data.k1, &self.data.k2)
            .map(|o| o.models)
            .unwrap_or_default()
    }
}

impl Problem for PointEssentialProblem {
    essential_common!();

    fn sample_size(&self) -> usize {
        5
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<EssentialMatrix> {
        solve_e_5pt(&gather(&self.data.pairs, sample), &self.data.k1, &self.data.k2)
            .map(|o| o.models)
            .unwrap_or_default()
    }
}

/// Refit for the semi-calibrated case: pose and shared focal length are
/// refined together, starting from the current model.
fn refit_focal(pairs: &[PointPair], principal_point: &ImagePoint, current: &FocalModel, inliers: &[usize]) -> Option<FocalModel> {
    let k = CameraIntrinsics::simple(current.focal, principal_point.u, principal_point.v);
    let calibrated = Calibrated::new(gather(pairs, inliers), k, k).ok()?;
    let e = EssentialMatrix::from_fundamental(&current.fundamental, &k, &k);
    let (e, scale) = refine_essential(&e, &calibrated.calibrated, true)?;
    let k = CameraIntrinsics::simple(current.focal * scale, principal_point.u, principal_point.v);
    Some(FocalModel {
        fundamental: e.to_fundamental(&k, &k).ok()?,
        focal: k.fx,
    })
}

/// Fundamental matrix and shared focal length from covariant features.
#[derive(Debug, Clone)]
pub struct SiftFocalProblem {
    pub correspondences: Vec<SiftCorrespondence>,
    pub principal_point: ImagePoint,
    pairs: Vec<PointPair>,
}

impl SiftFocalProblem {
    pub fn new(correspondences: Vec<SiftCorrespondence>, principal_point: ImagePoint) -> Self {
        let pairs = correspondences.iter().map(|c| c.points()).collect();
        Self {
            correspondences,
            principal_point,
            pairs,
        }
    }
}

/// Six-point counterpart of [`SiftFocalProblem`].
#[derive(Debug, Clone)]
pub struct PointFocalProblem {
    pub pairs: Vec<PointPair>,
    pub principal_point: ImagePoint,
}

impl PointFocalProblem {
    pub fn new(pairs: Vec<PointPair>, principal_point: ImagePoint) -> Self {
        Self { pairs, principal_point }
    }
}

macro_rules! focal_common {
    () => {
        type Model = FocalModel;

        fn len(&self) -> usize {
            self.pairs.len()
        }

        fn pair(&self, i: usize) -> PointPair {
            self.pairs[i]
        }

        fn residual(&self, model: &FocalModel, i: usize) -> f64 {
            let (a, b) = &self.pairs[i];
            symmetric_epipolar_error(model.fundamental.matrix(), a, b)
        }

        fn is_sample_degenerate(&self, sample: &[usize]) -> bool {
            !degeneracy_check(&gather(&self.pairs, sample), ProblemKind::FundamentalFocal)
        }

        fn fit_nonminimal(&self, current: &FocalModel, inliers: &[usize]) -> Option<FocalModel> {
            refit_focal(&self.pairs, &self.principal_point, current, inliers)
        }
    };
}

impl Problem for SiftFocalProblem {
    focal_common!();

    fn sample_size(&self) -> usize {
        3
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<FocalModel> {
        solve_f_focal_3sift(&gather(&self.correspondences, sample), &self.principal_point)
            .map(|o| o.models)
            .unwrap_or_default()
    }
}

impl Problem for PointFocalProblem {
    focal_common!();

    fn sample_size(&self) -> usize {
        6
    }

    fn fit_minimal(&self, sample: &[usize]) -> Vec<FocalModel> {
        solve_f_focal_6pt(&gather(&self.pairs, sample), &self.principal_point)
            .map(|o| o.models)
            .unwrap_or_default()
    }
}

/// Solver-independent summary of a robust estimation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustEstimate {
    pub solver: SolverKind,
    /// Pixel fundamental matrix of the best model.
    pub fundamental: Option<FundamentalMatrix>,
    /// Calibrated essential matrix, for the essential solvers.
    pub essential: Option<EssentialMatrix>,
    pub focal: Option<f64>,
    pub inliers: Vec<usize>,
    pub iterations: usize,
    pub models_scored: usize,
    pub lo_rounds: usize,
    /// Seconds spent inside the estimator.
    pub wall_time: f64,
    pub score: f64,
}

impl RobustEstimate {
    fn from_report<M>(solver: SolverKind, report: RansacReport<M>, convert: impl Fn(M) -> Option<MinimalModel>) -> Self {
        let model = report.model.and_then(convert);
        Self {
            solver,
            fundamental: model.map(|m| m.fundamental),
            essential: model.and_then(|m| m.essential),
            focal: model.and_then(|m| m.focal),
            inliers: report.inliers,
            iterations: report.iterations,
            models_scored: report.models_scored,
            lo_rounds: report.lo_rounds,
            wall_time: report.wall_time,
            score: report.score,
        }
    }

    pub fn is_success(&self) -> bool {
        self.fundamental.is_some()
    }

    /// Relative pose of the best model, recovered by cheirality over the
    /// inliers. Fundamental matrices are upgraded with the given intrinsics,
    /// or with the estimated focal length for the focal solvers.
    pub fn pose(
        &self,
        correspondences: &[SiftCorrespondence],
        k1: &CameraIntrinsics,
        k2: &CameraIntrinsics,
    ) -> Result<RelativePose> {
        let f = self.fundamental.ok_or(Error::DegenerateConfiguration)?;
        let (k1, k2) = match self.focal {
            Some(focal) => {
                let k = CameraIntrinsics::simple(focal, k1.cx, k1.cy);
                (k, k)
            }
            None => (*k1, *k2),
        };
        let e = self
            .essential
            .unwrap_or_else(|| EssentialMatrix::from_fundamental(&f, &k1, &k2));
        let pairs: Vec<PointPair> = self.inliers.iter().map(|&i| correspondences[i].points()).collect();
        decompose_essential(&e, &pairs, &k1, &k2)
    }
}

/// Runs RANSAC with the minimal solver `solver`. The essential solvers use
/// both intrinsics; the focal solvers take the principal point from `k1`;
/// the fundamental solvers ignore them.
pub fn estimate(
    solver: SolverKind,
    correspondences: &[SiftCorrespondence],
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    config: &RansacConfig,
) -> Result<RobustEstimate> {
    let pairs = || correspondences.iter().map(|c| c.points()).collect::<Vec<_>>();
    let plain = |f: FundamentalMatrix| {
        Some(MinimalModel {
            fundamental: f,
            essential: None,
            focal: None,
        })
    };
    let calibrated = |e: EssentialMatrix| {
        Some(MinimalModel {
            fundamental: e.to_fundamental(k1, k2).ok()?,
            essential: Some(e),
            focal: None,
        })
    };
    let focal = |m: FocalModel| {
        Some(MinimalModel {
            fundamental: m.fundamental,
            essential: None,
            focal: Some(m.focal),
        })
    };
    let pp = ImagePoint::new(k1.cx, k1.cy);
    Ok(match solver {
        SolverKind::F4Sift => {
            let problem = SiftFundamentalProblem::new(correspondences.to_vec());
            RobustEstimate::from_report(solver, ransac(&problem, config)?, plain)
        }
        SolverKind::F7pt => {
            let problem = PointFundamentalProblem::new(pairs());
            RobustEstimate::from_report(solver, ransac(&problem, config)?, plain)
        }
        SolverKind::E3Sift => {
            let problem = SiftEssentialProblem::new(correspondences.to_vec(), *k1, *k2)?;
            RobustEstimate::from_report(solver, ransac(&problem, config)?, calibrated)
        }
        SolverKind::E5pt => {
            let problem = PointEssentialProblem::new(pairs(), *k1, *k2)?;
            RobustEstimate::from_report(solver, ransac(&problem, config)?, calibrated)
        }
        SolverKind::FF3Sift => {
            let problem = SiftFocalProblem::new(correspondences.to_vec(), pp);
            RobustEstimate::from_report(solver, ransac(&problem, config)?, focal)
        }
        SolverKind::FF6pt => {
            let problem = PointFocalProblem::new(pairs(), pp);
            RobustEstimate::from_report(solver, ransac(&problem, config)?, focal)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::calibrated_scene;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn termination_formula_examples() {
        assert_eq!(required_iterations(1.0, 3, 0.99), 1.0);
        assert_eq!(required_iterations(0.5, 3, 0.99), 35.0);
        assert_eq!(required_iterations(0.5, 5, 0.99), 146.0);
        assert_eq!(required_iterations(0.0, 5, 0.99), f64::INFINITY);
        for eps in [0.1, 0.3, 0.5, 0.7, 0.9] {
            for m in 1..8 {
                assert!(required_iterations(eps, m + 1, 0.99) >= required_iterations(eps, m, 0.99));
            }
        }
    }

    #[test]
    fn msac_boundaries() {
        let (s, inl) = score_msac([0.0; 5], 1.0);
        assert_eq!(s, 0.0);
        assert_eq!(inl, vec![0, 1, 2, 3, 4]);
        let (s, inl) = score_msac([0.0, 0.75, 0.5], 0.75);
        assert_eq!(inl, vec![0, 2]);
        assert_eq!(s, 0.75 * 0.75 + 0.25);
    }

    #[test]
    fn degeneracy_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let scene = calibrated_scene(&mut rng, 7);
        let pairs = scene.pairs();
        assert!(degeneracy_check(&pairs, ProblemKind::Fundamental));
        let mut dup = pairs.clone();
        dup[3] = dup[1];
        assert!(!degeneracy_check(&dup, ProblemKind::Essential));
        let line: Vec<PointPair> = (0..4)
            .map(|i| {
                let s = 10.0 * i as f64;
                (ImagePoint::new(100.0 + s, 50.0 + 2.0 * s), ImagePoint::new(300.0 + 3.0 * s, 40.0 - s * 0.5 + s * s))
            })
            .collect();
        assert!(!degeneracy_check(&line, ProblemKind::Fundamental));
        assert!(degeneracy_check(&line, ProblemKind::Essential));
    }

    fn noisy(p: &ImagePoint, sigma: f64, rng: &mut ChaCha8Rng) -> ImagePoint {
        let n = Normal::new(0.0, sigma).unwrap();
        ImagePoint::new(p.u + n.sample(rng), p.v + n.sample(rng))
    }

    /// Inliers from a scene plus uniformly random mismatches.
    fn contaminated(rng: &mut ChaCha8Rng, n: usize, ratio: f64) -> (crate::testing::Scene, Vec<SiftCorrespondence>, usize) {
        let scene = calibrated_scene(rng, n);
        let inliers = (n as f64 * ratio).round() as usize;
        let mut corr = scene.features.clone();
        for c in corr.iter_mut().skip(inliers) {
            c.second.point = ImagePoint::new(rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0));
            c.second.angle = rng.random_range(0.0..std::f64::consts::TAU);
        }
        (scene, corr, inliers)
    }

    #[test]
    fn sift_essential_ransac_finds_planted_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let (scene, corr, planted) = contaminated(&mut rng, 100, 0.6);
            let problem = SiftEssentialProblem::new(corr, scene.k1, scene.k2).unwrap();
            let config = RansacConfig {
                seed: trial,
                ..Default::default()
            };
            let report = ransac(&problem, &config).unwrap();
            let e = report.model.unwrap();
            // a mismatch near an epipolar line may pull the wide-support refit
            assert!(e.distance(&scene.essential) < 1e-2, "{}", e.distance(&scene.essential));
            let recovered = report.inliers.iter().filter(|&&i| i < planted).count();
            assert_eq!(recovered, planted);
        }
    }

    #[test]
    fn all_inliers_stop_after_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let scene = calibrated_scene(&mut rng, 100);
        let problem = SiftEssentialProblem::new(scene.features.clone(), scene.k1, scene.k2).unwrap();
        let report = ransac(&problem, &RansacConfig::default()).unwrap();
        assert_eq!(report.iterations, 1);
        assert_eq!(report.inliers.len(), 100);
    }

    #[test]
    fn ransac_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (_, corr, _) = contaminated(&mut rng, 80, 0.5);
        let problem = SiftFundamentalProblem::new(corr);
        let config = RansacConfig {
            seed: 9,
            ..Default::default()
        };
        let a = ransac(&problem, &config).unwrap();
        let b = ransac(&problem, &config).unwrap();
        assert_eq!(a.inliers, b.inliers);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.model.unwrap().to_row_major().map(f64::to_bits), b.model.unwrap().to_row_major().map(f64::to_bits));
        for i in &a.inliers {
            assert!(problem.residual(&a.model.unwrap(), *i) < config.threshold);
        }
    }

    #[test]
    fn local_optimization_fixpoint_and_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let scene = calibrated_scene(&mut rng, 30);
        let problem = PointFundamentalProblem::new(scene.pairs());
        let lo = local_optimize(&problem, &scene.fundamental, 0.75);
        assert!(lo.model.distance(&scene.fundamental) < 1e-10);

        let few = PointFundamentalProblem::new(scene.pairs()[..5].to_vec());
        let lo = local_optimize(&few, &scene.fundamental, 0.75);
        assert!(lo.insufficient_inliers);
        assert_eq!(lo.model, scene.fundamental);
    }

    #[test]
    fn local_optimization_does_not_increase_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..20 {
            let scene = calibrated_scene(&mut rng, 100);
            let pairs: Vec<PointPair> = scene
                .pairs()
                .iter()
                .map(|(a, b)| (noisy(a, 1.0, &mut rng), noisy(b, 1.0, &mut rng)))
                .collect();
            let problem = PointFundamentalProblem::new(pairs.clone());
            let start = solve_f_7pt(&pairs[..7]).unwrap().models[0];
            // a threshold wide enough that every point is an inlier makes the
            // score the sum of squared symmetric errors
            let lo = local_optimize(&problem, &start, 1e6);
            assert!(lo.rounds >= 1);
            for w in lo.history.windows(2) {
                assert!(w[1] <= w[0], "{:?}", lo.history);
            }
            let mean = |f: &FundamentalMatrix| pairs.iter().map(|(a, b)| symmetric_epipolar_error(f.matrix(), a, b)).sum::<f64>();
            assert!(mean(&lo.model) < mean(&start));
        }
    }

    #[test]
    fn ground_truth_scores_better_than_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut wins = 0;
        for _ in 0..200 {
            let scene = calibrated_scene(&mut rng, 50);
            let pairs: Vec<PointPair> = scene
                .pairs()
                .iter()
                .map(|(a, b)| (noisy(a, 0.5, &mut rng), noisy(b, 0.5, &mut rng)))
                .collect();
            let problem = PointFundamentalProblem::new(pairs);
            let random = FundamentalMatrix::new(Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))).rank2_projected();
            if score_model(&problem, &scene.fundamental, 0.75).0 < score_model(&problem, &random, 0.75).0 {
                wins += 1;
            }
        }
        assert!(wins >= 198);
    }

    #[test]
    fn config_validation_and_small_inputs() {
        let bad = RansacConfig {
            confidence: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let problem = PointFundamentalProblem::new(vec![(ImagePoint::new(0.0, 0.0), ImagePoint::new(1.0, 1.0)); 3]);
        assert!(matches!(ransac(&problem, &RansacConfig::default()), Err(Error::WrongSampleSize { .. })));
        let problem = PointFundamentalProblem::new(vec![(ImagePoint::new(0.0, 0.0), ImagePoint::new(1.0, 1.0)); 10]);
        let report = ransac(
            &problem,
            &RansacConfig {
                max_iterations: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!report.is_success() && report.inliers.is_empty() && report.iterations == 20);
    }
}
