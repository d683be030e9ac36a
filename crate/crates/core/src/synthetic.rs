//! Synthetic two-view scenes with exact ground truth.
//!
//! Two cameras sit on a sphere around the origin and look at it. Points are
//! drawn on random planes near the origin; each plane induces a homography
//! whose local linearization gives the affinity of every correspondence on
//! it. Feature orientations and scales are produced by pushing a random
//! first-image Jacobian through that affinity.

use nalgebra::{Matrix2, Matrix3, Matrix3x4, Vector3};
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::constraints::{affine_from_homography, sample_consistent_orientation, Homography, JacobianDecomposition};
use crate::error::{Error, Result};
use crate::geometry::{
    relative_focal_error, symmetric_epipolar_error, AffineCorrespondence, CameraIntrinsics, EssentialMatrix,
    FundamentalMatrix, ImagePoint, RelativePose, SiftCorrespondence, SiftFeature,
};
use crate::solvers::{solve_minimal, MinimalModel, PointPair, SolverKind};

/// Scene draws attempted before giving up.
pub const MAX_SCENE_ATTEMPTS: usize = 10_000;

/// Minimum distance in pixels between an epipole and any projected point.
const EPIPOLE_CLEARANCE: f64 = 1.0;

/// Largest accepted condition number of a clean affinity; grazing views
/// of a plane are redrawn.
const MAX_AFFINE_CONDITION: f64 = 10.0;

/// Smallest accepted triangle spanned by three of the four homography
/// points, as a fraction of the image area.
const MIN_DLT_AREA: f64 = 0.01;

/// Draws of a single plane point or homography quadruple before the whole
/// scene is redrawn.
const POINT_ATTEMPTS: usize = 200;

/// Minimum depth of any scene point in front of a camera.
const MIN_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Range of the camera sphere radius.
    pub sphere_radius_range: (f64, f64),
    pub planes: usize,
    pub points_per_plane: usize,
    /// Noise level in pixels used by the benchmark drivers.
    pub noise_sigma: f64,
    /// Range of the focal length shared by both cameras, in pixels.
    pub focal_range: (f64, f64),
    /// Image width and height in pixels; the principal point is the centre.
    pub image_size: (f64, f64),
    /// Half-width of the cube around the origin each camera aims at. With
    /// zero jitter the optical axes meet at the origin, which leaves a shared
    /// focal length undetermined.
    pub aim_jitter: f64,
    /// Range of the first-image Jacobian scales `qu`, `qv`.
    pub feature_scale_range: (f64, f64),
    /// Range of the first-image Jacobian shear `w`.
    pub shear_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sphere_radius_range: (0.1, 10.0),
            planes: 2,
            points_per_plane: 10,
            noise_sigma: 0.0,
            focal_range: (600.0, 1200.0),
            image_size: (1000.0, 1000.0),
            aim_jitter: 0.5,
            feature_scale_range: (1.0, 10.0),
            shear_range: (-1.0, 1.0),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.sphere_radius_range;
        if !(r0 > 0.0 && r1 >= r0 && r1.is_finite()) {
            return Err(Error::InvalidConfig("sphere radius range must be positive and ordered"));
        }
        if self.planes < 2 {
            return Err(Error::InvalidConfig("at least two planes are required"));
        }
        if self.points_per_plane == 0 {
            return Err(Error::InvalidConfig("points per plane must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise sigma must be non-negative"));
        }
        let (f0, f1) = self.focal_range;
        if !(f0 > 0.0 && f1 >= f0 && f1.is_finite()) {
            return Err(Error::InvalidConfig("focal range must be positive and ordered"));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return Err(Error::InvalidConfig("image size must be positive"));
        }
        if !(self.aim_jitter >= 0.0 && self.aim_jitter.is_finite()) {
            return Err(Error::InvalidConfig("aim jitter must be non-negative"));
        }
        let (q0, q1) = self.feature_scale_range;
        if !(q0 > 0.0 && q1 >= q0 && q1.is_finite()) {
            return Err(Error::InvalidConfig("feature scale range must be positive and ordered"));
        }
        if !(self.shear_range.1 >= self.shear_range.0) {
            return Err(Error::InvalidConfig("shear range must be ordered"));
        }
        Ok(())
    }
}

/// A scene plane with the homography it induces between the two images.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlane {
    pub normal: Vector3<f64>,
    /// Distance of the plane from the origin.
    pub distance: f64,
    pub homography: Homography,
    /// The four projected plane points the homography is estimated from.
    pub dlt_points: [PointPair; 4],
}

/// One correspondence with everything needed to rebuild it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticCorrespondence {
    pub sift: SiftCorrespondence,
    pub affine: AffineCorrespondence,
    pub plane: usize,
    pub point: Vector3<f64>,
    /// First-image feature Jacobian.
    pub jacobian: JacobianDecomposition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub p1: Matrix3x4<f64>,
    pub p2: Matrix3x4<f64>,
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
    pub gt_pose: RelativePose,
    /// Unit-norm pixel fundamental matrix.
    pub gt_f: FundamentalMatrix,
    /// `K2ᵀ F K1`, scaled to unit norm.
    pub gt_e: EssentialMatrix,
    pub gt_focal: f64,
    pub planes: Vec<ScenePlane>,
    pub correspondences: Vec<SyntheticCorrespondence>,
    /// Accumulated noise level in pixels.
    pub sigma: f64,
}

impl SyntheticScene {
    pub fn len(&self) -> usize {
        self.correspondences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correspondences.is_empty()
    }

    pub fn features(&self) -> Vec<SiftCorrespondence> {
        self.correspondences.iter().map(|c| c.sift).collect()
    }

    pub fn pairs(&self) -> Vec<PointPair> {
        self.correspondences.iter().map(|c| c.sift.points()).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<SiftCorrespondence> {
        indices.iter().map(|&i| self.correspondences[i].sift).collect()
    }

    /// Indices of a minimal sample of size `m` drawn from two planes.
    ///
    /// A sample whose feature rows all come from one plane leaves the
    /// plane-induced family of fundamental matrices undetermined, so the
    /// sample is split as evenly as possible between two random planes and
    /// interleaved so that any prefix also spans both.
    pub fn two_plane_sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Vec<usize>> {
        if m > self.len() {
            return Err(Error::WrongSampleSize {
                expected: m,
                got: self.len(),
            });
        }
        let chosen = index_sample(rng, self.planes.len(), 2);
        let (a, b) = (chosen.index(0), chosen.index(1));
        let on = |p: usize| -> Vec<usize> { (0..self.len()).filter(|&i| self.correspondences[i].plane == p).collect() };
        let (on_a, on_b) = (on(a), on(b));
        let (na, nb) = (m.div_ceil(2), m / 2);
        if on_a.len() < na || on_b.len() < nb {
            return Ok(index_sample(rng, self.len(), m).into_vec());
        }
        let pick = |set: &[usize], k: usize, rng: &mut R| -> Vec<usize> {
            index_sample(rng, set.len(), k).into_iter().map(|i| set[i]).collect()
        };
        let sa = pick(&on_a, na, rng);
        let sb = pick(&on_b, nb, rng);
        let mut out = Vec::with_capacity(m);
        for i in 0..na {
            out.push(sa[i]);
            if i < nb {
                out.push(sb[i]);
            }
        }
        Ok(out)
    }

    /// Mean symmetric epipolar error of `f` over the given correspondences.
    pub fn mean_epipolar_error(&self, f: &Matrix3<f64>, indices: &[usize]) -> f64 {
        if indices.is_empty() {
            return f64::NAN;
        }
        let sum: f64 = indices
            .iter()
            .map(|&i| {
                let (p1, p2) = self.correspondences[i].sift.points();
                symmetric_epipolar_error(f, &p1, &p2)
            })
            .sum();
        sum / indices.len() as f64
    }

    /// Indices not contained in `used`.
    pub fn held_out(&self, used: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|i| !used.contains(i)).collect()
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Two unit vectors completing `n` to an orthonormal basis.
fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = n.cross(&helper).normalize();
    let b2 = n.cross(&b1);
    (b1, b2)
}

/// World-to-camera rotation of a camera at `center` looking at `target`.
fn look_at<R: Rng + ?Sized>(center: &Vector3<f64>, target: &Vector3<f64>, rng: &mut R) -> Matrix3<f64> {
    let z = (target - center).normalize();
    loop {
        let up = random_unit(rng);
        let x = up.cross(&z);
        if x.norm() > 1e-3 {
            let x = x.normalize();
            let y = z.cross(&x);
            return Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        }
    }
}

fn project(p: &Matrix3x4<f64>, x: &Vector3<f64>) -> Option<ImagePoint> {
    let h = p * x.push(1.0);
    (h.z > MIN_DEPTH).then(|| ImagePoint::new(h.x / h.z, h.y / h.z))
}

fn projection(k: &Matrix3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix3x4<f64> {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    rt.set_column(3, t);
    k * rt
}

fn well_conditioned(a: &Matrix2<f64>) -> bool {
    let sv = a.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    lo > 0.0 && hi <= MAX_AFFINE_CONDITION * lo
}

/// Smallest triangle over the four point triples, in both images.
fn min_triangle_area(points: &[PointPair]) -> f64 {
    let area = |a: &ImagePoint, b: &ImagePoint, c: &ImagePoint| {
        0.5 * ((b.u - a.u) * (c.v - a.v) - (c.u - a.u) * (b.v - a.v)).abs()
    };
    let mut min = f64::INFINITY;
    for skip in 0..points.len() {
        let rest: Vec<&PointPair> = points.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, p)| p).collect();
        min = min
            .min(area(&rest[0].0, &rest[1].0, &rest[2].0))
            .min(area(&rest[0].1, &rest[1].1, &rest[2].1));
    }
    min
}

fn inside(p: &ImagePoint, size: (f64, f64)) -> bool {
    p.u >= 0.0 && p.u <= size.0 && p.v >= 0.0 && p.v <= size.1
}

/// Feature pair obtained by pushing the first-image Jacobian through `a`.
fn transport(
    p1: ImagePoint,
    p2: ImagePoint,
    a: &Matrix2<f64>,
    j1: &JacobianDecomposition,
) -> Result<SiftCorrespondence> {
    let j2 = JacobianDecomposition::from_matrix(&(a * j1.matrix()))?;
    Ok(SiftCorrespondence::new(
        SiftFeature::new(p1, j1.alpha, j1.scale())?,
        SiftFeature::new(p2, j2.alpha, j2.scale())?,
    ))
}

fn try_generate<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Option<SyntheticScene> {
    let radius = rng.random_range(config.sphere_radius_range.0..=config.sphere_radius_range.1);
    let focal = rng.random_range(config.focal_range.0..=config.focal_range.1);
    let (w, h) = config.image_size;
    let k = CameraIntrinsics::simple(focal, 0.5 * w, 0.5 * h);
    let km = k.matrix();

    let c1 = radius * random_unit(rng);
    let c2 = radius * random_unit(rng);
    if (c1 - c2).norm() < 1e-3 * radius {
        return None;
    }
    let aim = |rng: &mut R| -> Vector3<f64> { config.aim_jitter * Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0)) };
    let (a1, a2) = (aim(rng), aim(rng));
    if (c1 - a1).norm() < 1e-3 || (c2 - a2).norm() < 1e-3 {
        return None;
    }
    let r1 = look_at(&c1, &a1, rng);
    let r2 = look_at(&c2, &a2, rng);
    let t1 = -r1 * c1;
    let t2 = -r2 * c2;
    let p1 = projection(&km, &r1, &t1);
    let p2 = projection(&km, &r2, &t2);

    let rotation = r2 * r1.transpose();
    let translation = t2 - rotation * t1;
    let gt_pose = RelativePose::new(rotation, translation).ok()?;
    let e = EssentialMatrix::from_pose(&gt_pose);
    let f = e.to_fundamental(&k, &k).ok()?;
    let f = FundamentalMatrix::new(f.matrix() / f.matrix().norm());
    let e_pix = km.transpose() * f.matrix() * km;
    let gt_e = EssentialMatrix::new(e_pix / e_pix.norm());

    // epipoles: each camera centre seen by the other camera
    let epipole1 = project(&p1, &c2);
    let epipole2 = project(&p2, &c1);

    let mut planes = Vec::with_capacity(config.planes);
    let mut correspondences = Vec::with_capacity(config.planes * config.points_per_plane);
    for plane in 0..config.planes {
        let normal = random_unit(rng);
        let distance = rng.random_range(0.0..=1.0);
        let (b1, b2) = plane_basis(&normal);
        let foot = distance * normal;
        let plane_point = |rng: &mut R| foot + rng.random_range(-1.0..=1.0) * b1 + rng.random_range(-1.0..=1.0) * b2;

        let visible = |rng: &mut R| -> Option<(Vector3<f64>, PointPair)> {
            (0..POINT_ATTEMPTS).find_map(|_| {
                let x = plane_point(rng);
                let (a, b) = (project(&p1, &x)?, project(&p2, &x)?);
                (inside(&a, config.image_size) && inside(&b, config.image_size)).then_some((x, (a, b)))
            })
        };

        let min_area = MIN_DLT_AREA * config.image_size.0 * config.image_size.1;
        let mut dlt = None;
        for _ in 0..POINT_ATTEMPTS {
            let quad: Vec<PointPair> = (0..4).map(|_| visible(rng).map(|v| v.1)).collect::<Option<_>>()?;
            if min_triangle_area(&quad) >= min_area {
                dlt = Some(quad);
                break;
            }
        }
        let dlt = dlt?;
        let homography = Homography::from_points(&dlt).ok()?;

        for _ in 0..config.points_per_plane {
            let mut drawn = None;
            for _ in 0..POINT_ATTEMPTS {
                let (x, (a, b)) = visible(rng)?;
                let near = |e: Option<ImagePoint>, p: &ImagePoint| e.is_some_and(|e| e.distance(p) < EPIPOLE_CLEARANCE);
                if near(epipole1, &a) || near(epipole2, &b) {
                    continue;
                }
                let Ok(affine) = affine_from_homography(&homography, &a) else { continue };
                let am = affine.matrix();
                if am.determinant() > 0.0 && well_conditioned(&am) {
                    drawn = Some((x, a, b, am));
                    break;
                }
            }
            let (x, a, b, am) = drawn?;
            let alpha = sample_consistent_orientation(&am, rng)?;
            let (q0, q1) = config.feature_scale_range;
            let jacobian = JacobianDecomposition {
                alpha,
                qu: rng.random_range(q0..=q1),
                qv: rng.random_range(q0..=q1),
                w: rng.random_range(config.shear_range.0..=config.shear_range.1),
            };
            // the homography is estimated, so re-anchor the second point on the true projection
            let affine = AffineCorrespondence::from_matrix(a, b, &am);
            let sift = transport(a, b, &am, &jacobian).ok()?;
            correspondences.push(SyntheticCorrespondence {
                sift,
                affine,
                plane,
                point: x,
                jacobian,
            });
        }
        planes.push(ScenePlane {
            normal,
            distance,
            homography,
            dlt_points: [dlt[0], dlt[1], dlt[2], dlt[3]],
        });
    }

    Some(SyntheticScene {
        p1,
        p2,
        k1: k,
        k2: k,
        gt_pose,
        gt_f: f,
        gt_e,
        gt_focal: focal,
        planes,
        correspondences,
        sigma: 0.0,
    })
}

/// Draws a noise-free scene. Plane points are redrawn while they fall
/// behind a camera or outside an image, come within a pixel of an epipole,
/// or have a mirrored or strongly anisotropic affinity; the homography
/// points are redrawn while they are nearly collinear. Cameras and planes
/// are redrawn when that keeps failing.
pub fn generate_scene<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Result<SyntheticScene> {
    config.validate()?;
    for _ in 0..MAX_SCENE_ATTEMPTS {
        if let Some(scene) = try_generate(config, rng) {
            return Ok(scene);
        }
    }
    Err(Error::ResampleCapExceeded(MAX_SCENE_ATTEMPTS))
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma` to every
/// image point and to the points each homography is estimated from, then
/// re-derives the affinities and second-image features from the noisy
/// homographies. The standard normals are drawn in the same order for every
/// `sigma`, so scenes noised with the same rng state differ only in scale.
pub fn add_noise<R: Rng + ?Sized>(scene: &SyntheticScene, sigma: f64, rng: &mut R) -> SyntheticScene {
    let mut out = scene.clone();
    if sigma == 0.0 {
        return out;
    }
    let jitter = |p: &ImagePoint, rng: &mut R| {
        let du: f64 = rng.sample(StandardNormal);
        let dv: f64 = rng.sample(StandardNormal);
        ImagePoint::new(p.u + sigma * du, p.v + sigma * dv)
    };
    let noisy_points: Vec<PointPair> = scene
        .correspondences
        .iter()
        .map(|c| {
            let (a, b) = c.sift.points();
            (jitter(&a, rng), jitter(&b, rng))
        })
        .collect();
    for plane in &mut out.planes {
        for pair in &mut plane.dlt_points {
            *pair = (jitter(&pair.0, rng), jitter(&pair.1, rng));
        }
        if let Ok(h) = Homography::from_points(&plane.dlt_points) {
            plane.homography = h;
        }
    }
    for (c, (a, b)) in out.correspondences.iter_mut().zip(noisy_points) {
        let previous = c.sift;
        let fallback = SiftCorrespondence::new(
            SiftFeature { point: a, ..previous.first },
            SiftFeature { point: b, ..previous.second },
        );
        let reestimated = affine_from_homography(&out.planes[c.plane].homography, &a).ok();
        match reestimated.map(|ac| ac.matrix()) {
            Some(am) => {
                c.affine = AffineCorrespondence::from_matrix(a, b, &am);
                c.sift = transport(a, b, &am, &c.jacobian).unwrap_or(fallback);
            }
            None => {
                c.affine = AffineCorrespondence::from_matrix(a, b, &c.affine.matrix());
                c.sift = fallback;
            }
        }
    }
    out.sigma = (scene.sigma * scene.sigma + sigma * sigma).sqrt();
    out
}

/// Independent rng stream for one trial and purpose.
pub fn trial_rng(seed: u64, trial: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial.wrapping_mul(8).wrapping_add(purpose));
    rng
}

const SCENE_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

/// Errors of the best returned model of one solver run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    /// Mean symmetric epipolar error over the held-out correspondences.
    pub epipolar_error: f64,
    /// Relative focal error, for the focal solvers.
    pub focal_error: Option<f64>,
}

/// Solves on a two-plane minimal sample and scores every returned model on
/// the correspondences outside the sample. The model with the smallest
/// held-out error is reported.
pub fn evaluate_sample<R: Rng + ?Sized>(kind: SolverKind, scene: &SyntheticScene, rng: &mut R) -> Result<TrialOutcome> {
    let sample = scene.two_plane_sample(kind.sample_size(), rng)?;
    let models = solve_minimal(kind, &scene.select(&sample), &scene.k1, &scene.k2)?;
    let held = scene.held_out(&sample);
    best_model(&models, scene, &held)
}

fn best_model(models: &[MinimalModel], scene: &SyntheticScene, held: &[usize]) -> Result<TrialOutcome> {
    models
        .iter()
        .map(|m| {
            let f = m.fundamental.matrix() / m.fundamental.matrix().norm();
            TrialOutcome {
                epipolar_error: scene.mean_epipolar_error(&f, held),
                focal_error: m.focal.and_then(|f| relative_focal_error(f, scene.gt_focal).ok()),
            }
        })
        .filter(|o| o.epipolar_error.is_finite())
        .min_by(|a, b| a.epipolar_error.total_cmp(&b.epipolar_error))
        .ok_or(Error::DegenerateConfiguration)
}

/// Fixed-width histogram of `log10` errors with a separate failure count.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
    pub counts: Vec<usize>,
    pub failures: usize,
}

impl Histogram {
    pub const LOWER: f64 = -16.0;
    pub const UPPER: f64 = 2.0;
    pub const WIDTH: f64 = 0.5;

    pub fn new() -> Self {
        let bins = ((Self::UPPER - Self::LOWER) / Self::WIDTH).round() as usize;
        Self {
            lower: Self::LOWER,
            upper: Self::UPPER,
            width: Self::WIDTH,
            counts: vec![0; bins],
            failures: 0,
        }
    }

    /// Adds a `log10` value; values outside the range go to the end bins.
    pub fn add(&mut self, log_error: f64) {
        let bin = ((log_error - self.lower) / self.width).floor();
        let bin = bin.clamp(0.0, (self.counts.len() - 1) as f64) as usize;
        self.counts[bin] += 1;
    }

    pub fn bin_lower_edge(&self, bin: usize) -> f64 {
        self.lower + bin as f64 * self.width
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.failures
    }
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

/// Smallest error represented; exact solutions are clamped to it.
pub const ERROR_FLOOR: f64 = 1e-16;

/// Clamped `log10` of an error.
pub fn log_error(error: f64) -> f64 {
    error.max(ERROR_FLOOR).log10()
}

/// Per-trial `log10` errors of one solver, failures as `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub solver: SolverKind,
    pub log_errors: Vec<Option<f64>>,
    pub histogram: Histogram,
}

impl StabilityReport {
    fn new(solver: SolverKind, log_errors: Vec<Option<f64>>) -> Self {
        let mut histogram = Histogram::new();
        for e in &log_errors {
            match e {
                Some(v) => histogram.add(*v),
                None => histogram.failures += 1,
            }
        }
        Self {
            solver,
            log_errors,
            histogram,
        }
    }

    pub fn failure_rate(&self) -> f64 {
        self.histogram.failures as f64 / self.log_errors.len().max(1) as f64
    }

    /// Nearest-rank percentile with failures ranked above every error.
    pub fn percentile(&self, p: f64) -> f64 {
        let mut v: Vec<f64> = self.log_errors.iter().map(|e| e.unwrap_or(f64::INFINITY)).collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
        v[rank.clamp(1, v.len()) - 1]
    }

    pub fn median(&self) -> f64 {
        self.percentile(50.0)
    }
}

fn run_trials<F>(trials: usize, f: F) -> Vec<Option<f64>>
where
    F: Fn(u64) -> Option<f64> + Sync + Send,
{
    (0..trials as u64).into_par_iter().map(f).collect()
}

fn noisy_trial_scene(config: &SyntheticConfig, seed: u64, trial: u64, sigma: f64) -> Result<SyntheticScene> {
    let scene = generate_scene(config, &mut trial_rng(seed, trial, SCENE_STREAM))?;
    Ok(add_noise(&scene, sigma, &mut trial_rng(seed, trial, NOISE_STREAM)))
}

/// The scene and the two-plane minimal sample that trial `trial` of a
/// stability run draws for `kind`.
pub fn trial_sample(kind: SolverKind, config: &SyntheticConfig, trial: u64) -> Result<(SyntheticScene, Vec<usize>)> {
    config.validate()?;
    let scene = noisy_trial_scene(config, config.seed, trial, config.noise_sigma)?;
    let sample = scene.two_plane_sample(kind.sample_size(), &mut trial_rng(config.seed, trial, SAMPLE_STREAM))?;
    Ok((scene, sample))
}

/// Noise-free stability: per trial a fresh scene, one two-plane minimal
/// sample and the `log10` held-out symmetric epipolar error of the best
/// returned model. Uses `config.noise_sigma` as the noise level.
pub fn stability_histogram(solver: SolverKind, config: &SyntheticConfig, trials: usize) -> Result<StabilityReport> {
    config.validate()?;
    let log_errors = run_trials(trials, |t| {
        let scene = noisy_trial_scene(config, config.seed, t, config.noise_sigma).ok()?;
        let outcome = evaluate_sample(solver, &scene, &mut trial_rng(config.seed, t, SAMPLE_STREAM)).ok()?;
        Some(log_error(outcome.epipolar_error))
    });
    Ok(StabilityReport::new(solver, log_errors))
}

/// As [`stability_histogram`] but recording the relative focal error of the
/// selected model; only meaningful for the focal solvers.
pub fn focal_stability_histogram(
    solver: SolverKind,
    config: &SyntheticConfig,
    trials: usize,
) -> Result<StabilityReport> {
    if !matches!(solver, SolverKind::FF3Sift | SolverKind::FF6pt) {
        return Err(Error::InvalidConfig("focal stability needs a focal solver"));
    }
    config.validate()?;
    let log_errors = run_trials(trials, |t| {
        let scene = noisy_trial_scene(config, config.seed, t, config.noise_sigma).ok()?;
        let outcome = evaluate_sample(solver, &scene, &mut trial_rng(config.seed, t, SAMPLE_STREAM)).ok()?;
        outcome.focal_error.map(log_error)
    });
    Ok(StabilityReport::new(solver, log_errors))
}

/// One cell of a noise sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSweepRow {
    pub sigma: f64,
    pub solver: SolverKind,
    /// Mean held-out symmetric epipolar error over the successful trials.
    pub mean_error: f64,
    pub median_error: f64,
    pub failures: usize,
    pub trials: usize,
}

/// Mean held-out error per solver and noise level. Trial `t` uses the same
/// scene, the same standard normals and the same sampling stream for every
/// solver and every `sigma`.
pub fn noise_sweep(
    solvers: &[SolverKind],
    sigmas: &[f64],
    config: &SyntheticConfig,
    trials: usize,
) -> Result<Vec<NoiseSweepRow>> {
    config.validate()?;
    if sigmas.is_empty() || solvers.is_empty() {
        return Err(Error::InvalidConfig("noise sweep needs solvers and noise levels"));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig("noise levels must be non-negative"));
    }
    let scenes: Vec<Option<SyntheticScene>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| generate_scene(config, &mut trial_rng(config.seed, t, SCENE_STREAM)).ok())
        .collect();
    let mut rows = Vec::with_capacity(sigmas.len() * solvers.len());
    for &sigma in sigmas {
        for &solver in solvers {
            let errors: Vec<Option<f64>> = scenes
                .par_iter()
                .enumerate()
                .map(|(t, scene)| {
                    let scene = scene.as_ref()?;
                    let noisy = add_noise(scene, sigma, &mut trial_rng(config.seed, t as u64, NOISE_STREAM));
                    let mut rng = trial_rng(config.seed, t as u64, SAMPLE_STREAM);
                    evaluate_sample(solver, &noisy, &mut rng).ok().map(|o| o.epipolar_error)
                })
                .collect();
            let mut ok: Vec<f64> = errors.iter().flatten().copied().collect();
            ok.sort_by(f64::total_cmp);
            let mean_error = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
            let median_error = if ok.is_empty() { f64::NAN } else { ok[(ok.len() - 1) / 2] };
            rows.push(NoiseSweepRow {
                sigma,
                solver,
                mean_error,
                median_error,
                failures: trials - ok.len(),
                trials,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{affine_rows, decomposition_residuals, epipolar_row, sift_row};
    use crate::geometry::to_row_major;

    fn scene(seed: u64) -> SyntheticScene {
        generate_scene(&SyntheticConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn clean_rows_annihilate_ground_truth() {
        for seed in 0..200 {
            let s = scene(seed);
            let f = to_row_major(s.gt_f.matrix());
            for c in &s.correspondences {
                let (p1, p2) = c.sift.points();
                assert!(epipolar_row(&p1, &p2).normalized_residual(&f) < 1e-10);
                assert!(sift_row(&c.sift).unwrap().normalized_residual(&f) < 1e-10, "seed {seed}");
                for r in affine_rows(&c.affine) {
                    assert!(r.normalized_residual(&f) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn affinities_preserve_orientation_and_scene_shape() {
        for seed in 0..100 {
            let s = scene(seed);
            assert_eq!(s.planes.len(), 2);
            assert_eq!(s.len(), 20);
            assert!(s.correspondences.iter().all(|c| c.affine.det() > 0.0));
            assert!(s.correspondences.iter().all(|c| inside(&c.sift.first.point, (1000.0, 1000.0))));
        }
    }

    #[test]
    fn essential_is_calibrated_fundamental() {
        let s = scene(3);
        let k = s.k1.matrix();
        let e = k.transpose() * s.gt_f.matrix() * k;
        let e = e / e.norm();
        let d = (e - s.gt_e.matrix()).amax().min((e + s.gt_e.matrix()).amax());
        assert!(d < 1e-12);
        let from_pose = EssentialMatrix::from_pose(&s.gt_pose);
        assert!(from_pose.distance(&s.gt_e) < 1e-9);
    }

    #[test]
    fn affinity_matches_numerical_jacobian_of_plane_map() {
        for seed in 0..50 {
            let s = scene(seed);
            for c in &s.correspondences {
                let h = &s.planes[c.plane].homography;
                let p = c.sift.first.point;
                let step = 1e-4;
                let d = |du: f64, dv: f64| h.project(&ImagePoint::new(p.u + du, p.v + dv)).unwrap();
                let (pu, mu) = (d(step, 0.0), d(-step, 0.0));
                let (pv, mv) = (d(0.0, step), d(0.0, -step));
                let numeric = Matrix2::new(
                    (pu.u - mu.u) / (2.0 * step),
                    (pv.u - mv.u) / (2.0 * step),
                    (pu.v - mu.v) / (2.0 * step),
                    (pv.v - mv.v) / (2.0 * step),
                );
                assert!((numeric - c.affine.matrix()).amax() < 1e-5);
            }
        }
    }

    #[test]
    fn second_jacobian_reassembles() {
        let s = scene(11);
        for c in &s.correspondences {
            let j2 = c.affine.matrix() * c.jacobian.matrix();
            let d = JacobianDecomposition::from_matrix(&j2).unwrap();
            assert!((d.matrix() - j2).amax() < 1e-10 * j2.amax());
            assert!((d.alpha - c.sift.second.angle).abs() < 1e-12);
            assert!((d.scale() - c.sift.second.scale).abs() < 1e-10 * d.scale());
            assert!((c.jacobian.scale() - c.sift.first.scale).abs() < 1e-12 * c.sift.first.scale);
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        assert_eq!(scene(42), scene(42));
        assert_ne!(scene(42), scene(43));
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = scene(5);
        let n = add_noise(&s, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s, n);
    }

    #[test]
    fn unit_noise_gives_expected_epipolar_error() {
        let mut sum = 0.0;
        let mut count = 0;
        let mut seed = 0;
        while count < 10_000 {
            let s = scene(seed);
            let n = add_noise(&s, 1.0, &mut ChaCha8Rng::seed_from_u64(1000 + seed));
            let all: Vec<usize> = (0..n.len()).collect();
            sum += n.mean_epipolar_error(s.gt_f.matrix(), &all) * n.len() as f64;
            count += n.len();
            seed += 1;
        }
        let mean = sum / count as f64;
        assert!(mean > 0.8 && mean < 1.6, "mean {mean}");
    }

    #[test]
    fn feature_residuals_grow_with_noise() {
        let sigmas = [0.0, 0.5, 1.0, 2.0];
        let mut means = [0.0; 4];
        for seed in 0..200 {
            let s = scene(seed);
            for (i, &sigma) in sigmas.iter().enumerate() {
                let n = add_noise(&s, sigma, &mut ChaCha8Rng::seed_from_u64(seed));
                for (c, clean) in n.correspondences.iter().zip(&s.correspondences) {
                    let r = decomposition_residuals(&clean.affine.matrix(), &c.sift);
                    means[i] += r.iter().map(|x| x.abs()).sum::<f64>();
                }
            }
        }
        assert!(means[0] < 1e-8 * means[1]);
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    }

    #[test]
    fn two_plane_samples_span_both_planes() {
        let s = scene(9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in 3..=7 {
            let idx = s.two_plane_sample(m, &mut rng).unwrap();
            assert_eq!(idx.len(), m);
            let planes: Vec<usize> = idx.iter().map(|&i| s.correspondences[i].plane).collect();
            assert_ne!(planes[0], planes[1]);
            let mut sorted = idx.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), m);
        }
    }

    #[test]
    fn every_solver_is_exact_on_clean_scenes() {
        for kind in SolverKind::ALL {
            let config = SyntheticConfig::default();
            let report = stability_histogram(kind, &config, 200).unwrap();
            assert!(report.median() < -6.0, "{kind}: median {}", report.median());
        }
    }

    #[test]
    fn histogram_clamps_and_counts_failures() {
        let r = StabilityReport::new(SolverKind::F4Sift, vec![Some(log_error(0.0)), Some(5.0), None, Some(-3.2)]);
        assert_eq!(r.histogram.counts[0], 1);
        assert_eq!(*r.histogram.counts.last().unwrap(), 1);
        assert_eq!(r.histogram.failures, 1);
        assert_eq!(r.histogram.total(), 4);
        assert_eq!(r.histogram.counts.len(), 36);
        assert!((r.failure_rate() - 0.25).abs() < 1e-15);
        assert_eq!(r.percentile(100.0), f64::INFINITY);
    }

    #[test]
    fn trial_results_do_not_depend_on_worker_count() {
        let config = SyntheticConfig::default();
        let a = stability_histogram(SolverKind::E3Sift, &config, 64).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| stability_histogram(SolverKind::E3Sift, &config, 64).unwrap());
        assert_eq!(a, b);
    }
}
