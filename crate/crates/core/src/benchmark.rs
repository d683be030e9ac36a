//! Robust-estimation experiments on planted-outlier problems and the
//! dataset runner behind the benchmark tables.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    relative_focal_error, rotation_error, translation_error, CameraIntrinsics, ImagePoint, RelativePose,
    SiftCorrespondence, SiftFeature,
};
use crate::io::{
    load_correspondences, write_correspondences, write_file, AngleUnit, BenchmarkRow, FormatError, FormatResult,
    Manifest, ManifestEntry, PairMetadata,
};
use crate::robust::{estimate, RansacConfig, RobustEstimate};
use crate::solvers::SolverKind;
use crate::synthetic::{add_noise, generate_scene, trial_rng, SyntheticConfig, SyntheticScene};

const PROBLEM_STREAM: u64 = 3;

/// Correspondences mixing a noisy synthetic scene with uniform mismatches.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedProblem {
    /// The noisy inlier scene with its ground truth.
    pub scene: SyntheticScene,
    pub correspondences: Vec<SiftCorrespondence>,
    /// Positions of the scene correspondences, ascending.
    pub inliers: Vec<usize>,
}

fn random_feature<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> SiftFeature {
    let (w, h) = config.image_size;
    let (q0, q1) = config.feature_scale_range;
    SiftFeature::new(
        ImagePoint::new(rng.random_range(0.0..=w), rng.random_range(0.0..=h)),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(q0..=q1),
    )
    .expect("finite feature with positive scale")
}

/// `round(total · inlier_ratio)` scene correspondences spread over the
/// configured planes with noise `sigma`, plus mismatches whose two features
/// are drawn independently and uniformly over the images; shuffled.
pub fn planted_problem<R: Rng + ?Sized>(
    config: &SyntheticConfig,
    total: usize,
    inlier_ratio: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<PlantedProblem> {
    if !(0.0..=1.0).contains(&inlier_ratio) {
        return Err(Error::InvalidConfig("inlier ratio must lie in [0, 1]"));
    }
    let count = (total as f64 * inlier_ratio).round() as usize;
    if count < config.planes {
        return Err(Error::InvalidConfig("too few inliers for the configured planes"));
    }
    let per_plane = count.div_ceil(config.planes);
    let scene_config = SyntheticConfig {
        points_per_plane: per_plane,
        ..config.clone()
    };
    let mut scene = generate_scene(&scene_config, rng)?;
    // the surplus is below the plane count: drop one point from each of the last planes
    for plane in (0..config.planes).rev().take(scene.len() - count) {
        if let Some(at) = scene.correspondences.iter().rposition(|c| c.plane == plane) {
            scene.correspondences.remove(at);
        }
    }
    let scene = add_noise(&scene, sigma, rng);

    let mut items: Vec<(SiftCorrespondence, bool)> = scene.correspondences.iter().map(|c| (c.sift, true)).collect();
    for _ in count..total {
        items.push((SiftCorrespondence::new(random_feature(config, rng), random_feature(config, rng)), false));
    }
    items.shuffle(rng);
    let inliers = items.iter().enumerate().filter(|(_, (_, i))| *i).map(|(k, _)| k).collect();
    Ok(PlantedProblem {
        scene,
        correspondences: items.into_iter().map(|(c, _)| c).collect(),
        inliers,
    })
}

/// Pose and focal errors of an estimate against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EstimateErrors {
    pub rotation_deg: Option<f64>,
    pub translation_deg: Option<f64>,
    pub focal: Option<f64>,
}

pub fn estimate_errors(
    estimate: &RobustEstimate,
    correspondences: &[SiftCorrespondence],
    k1: Option<&CameraIntrinsics>,
    k2: Option<&CameraIntrinsics>,
    gt_pose: Option<&RelativePose>,
    gt_focal: Option<f64>,
) -> EstimateErrors {
    let mut out = EstimateErrors::default();
    if let (Some(k1), Some(k2), Some(gt)) = (k1, k2, gt_pose) {
        if let Ok(pose) = estimate.pose(correspondences, k1, k2) {
            out.rotation_deg = Some(rotation_error(&pose.rotation, &gt.rotation));
            out.translation_deg = translation_error(&pose.translation, &gt.translation).ok();
        }
    }
    if let (Some(f), Some(gt)) = (estimate.focal, gt_focal) {
        out.focal = relative_focal_error(f, gt).ok();
    }
    out
}

/// Turns an estimate into a table row. With `timing` off the wall time is
/// reported as zero so that output is reproducible.
pub fn benchmark_row(pair_id: &str, estimate: &RobustEstimate, errors: &EstimateErrors, timing: bool) -> BenchmarkRow {
    BenchmarkRow {
        pair_id: pair_id.to_string(),
        solver: estimate.solver.id().to_string(),
        rot_err_deg: errors.rotation_deg,
        trans_err_deg: errors.translation_deg,
        focal_err: errors.focal,
        wall_ms: if timing { estimate.wall_time * 1e3 } else { 0.0 },
        iterations: estimate.iterations,
        models_scored: estimate.models_scored,
        inliers: estimate.inliers.len(),
        status: if estimate.is_success() { BenchmarkRow::OK } else { BenchmarkRow::NO_MODEL }.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupConfig {
    pub problems: usize,
    pub correspondences: usize,
    pub inlier_ratio: f64,
    pub sigma: f64,
    pub ransac: RansacConfig,
    pub seed: u64,
    pub timing: bool,
}

impl Default for SpeedupConfig {
    fn default() -> Self {
        Self {
            problems: 500,
            correspondences: 200,
            inlier_ratio: 0.6,
            sigma: 0.5,
            ransac: RansacConfig::default(),
            seed: 0,
            timing: true,
        }
    }
}

/// Per-solver aggregate of a speedup experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub inlier_ratio: f64,
    pub solver: SolverKind,
    pub mean_models_scored: f64,
    pub mean_iterations: f64,
    pub mean_wall_ms: f64,
    pub median_rot_err_deg: f64,
    pub median_trans_err_deg: f64,
    pub failures: usize,
    pub problems: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupReport {
    pub rows: Vec<SpeedupRow>,
    /// One row per problem and solver, problem-major.
    pub runs: Vec<BenchmarkRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every solver on the same planted problems. Problem `p` is drawn
/// from its own stream and every solver uses RANSAC seed `seed + p`.
pub fn ransac_speedup(solvers: &[SolverKind], config: &SpeedupConfig, synthetic: &SyntheticConfig) -> Result<SpeedupReport> {
    synthetic.validate()?;
    config.ransac.validate()?;
    let runs: Vec<Vec<BenchmarkRow>> = (0..config.problems as u64)
        .into_par_iter()
        .map(|p| {
            let mut rng = trial_rng(config.seed, p, PROBLEM_STREAM);
            let problem = planted_problem(synthetic, config.correspondences, config.inlier_ratio, config.sigma, &mut rng);
            let id = format!("problem_{p:04}");
            solvers
                .iter()
                .map(|&solver| {
                    let problem = match &problem {
                        Ok(p) => p,
                        Err(e) => return BenchmarkRow::failure(&id, solver.id(), &e.to_string()),
                    };
                    let ransac = RansacConfig {
                        seed: config.seed.wrapping_add(p),
                        ..config.ransac
                    };
                    let scene = &problem.scene;
                    match estimate(solver, &problem.correspondences, &scene.k1, &scene.k2, &ransac) {
                        Ok(est) => {
                            let errors = estimate_errors(
                                &est,
                                &problem.correspondences,
                                Some(&scene.k1),
                                Some(&scene.k2),
                                Some(&scene.gt_pose),
                                Some(scene.gt_focal),
                            );
                            benchmark_row(&id, &est, &errors, config.timing)
                        }
                        Err(e) => BenchmarkRow::failure(&id, solver.id(), &e.to_string()),
                    }
                })
                .collect()
        })
        .collect();
    let runs: Vec<BenchmarkRow> = runs.into_iter().flatten().collect();

    let rows = solvers
        .iter()
        .map(|&solver| {
            let mine: Vec<&BenchmarkRow> = runs.iter().filter(|r| r.solver == solver.id()).collect();
            let n = mine.len().max(1) as f64;
            SpeedupRow {
                inlier_ratio: config.inlier_ratio,
                solver,
                mean_models_scored: mine.iter().map(|r| r.models_scored as f64).sum::<f64>() / n,
                mean_iterations: mine.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
                mean_wall_ms: mine.iter().map(|r| r.wall_ms).sum::<f64>() / n,
                median_rot_err_deg: median(mine.iter().map(|r| r.rot_err_deg.unwrap_or(f64::INFINITY)).collect()),
                median_trans_err_deg: median(mine.iter().map(|r| r.trans_err_deg.unwrap_or(f64::INFINITY)).collect()),
                failures: mine.iter().filter(|r| !r.is_ok()).count(),
                problems: mine.len(),
            }
        })
        .collect();
    Ok(SpeedupReport { rows, runs })
}

/// Runs one solver on one pair. Failures become rows with an error status.
pub fn run_pair(
    pair_id: &str,
    correspondences: &[SiftCorrespondence],
    metadata: Option<&PairMetadata>,
    solver: SolverKind,
    ransac: &RansacConfig,
    timing: bool,
) -> BenchmarkRow {
    let k1 = metadata.map(|m| m.intrinsics1());
    let k2 = metadata.map(|m| m.intrinsics2());
    let needs_intrinsics = !matches!(solver, SolverKind::F4Sift | SolverKind::F7pt);
    let (k1, k2) = match (k1, k2) {
        (Some(Ok(a)), Some(Ok(b))) => (Some(a), Some(b)),
        (None, _) if needs_intrinsics => return BenchmarkRow::failure(pair_id, solver.id(), "missing metadata"),
        (Some(Err(e)), _) | (_, Some(Err(e))) if needs_intrinsics => {
            return BenchmarkRow::failure(pair_id, solver.id(), &e.to_string())
        }
        _ => (None, None),
    };
    let identity = CameraIntrinsics::identity();
    let result = estimate(
        solver,
        correspondences,
        k1.as_ref().unwrap_or(&identity),
        k2.as_ref().unwrap_or(&identity),
        ransac,
    );
    match result {
        Ok(est) => {
            let gt_pose = metadata.and_then(|m| m.ground_truth_pose());
            let errors = estimate_errors(
                &est,
                correspondences,
                k1.as_ref(),
                k2.as_ref(),
                gt_pose.as_ref(),
                metadata.and_then(|m| m.focal),
            );
            benchmark_row(pair_id, &est, &errors, timing)
        }
        Err(e) => BenchmarkRow::failure(pair_id, solver.id(), &e.to_string()),
    }
}

/// Runs every solver on every manifest pair, in parallel across pairs.
/// Rows are ordered by pair, then by solver.
pub fn run_dataset(manifest: &Manifest, solvers: &[SolverKind], ransac: &RansacConfig, timing: bool) -> Vec<BenchmarkRow> {
    manifest
        .pairs
        .par_iter()
        .map(|entry| {
            let correspondences = load_correspondences(&entry.correspondences);
            let metadata = entry.metadata.as_ref().map(|p| PairMetadata::load(p));
            solvers
                .iter()
                .map(|&solver| match (&correspondences, &metadata) {
                    (Err(e), _) => BenchmarkRow::failure(&entry.id, solver.id(), &e.to_string()),
                    (_, Some(Err(e))) => BenchmarkRow::failure(&entry.id, solver.id(), &e.to_string()),
                    (Ok(c), m) => run_pair(&entry.id, c, m.as_ref().and_then(|m| m.as_ref().ok()), solver, ransac, timing),
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Intrinsics, pose and focal length of a synthetic scene.
pub fn scene_metadata(pair_id: &str, scene: &SyntheticScene) -> PairMetadata {
    PairMetadata {
        dataset: Some("synthetic".to_string()),
        pair_id: Some(pair_id.to_string()),
        focal: Some(scene.gt_focal),
        ..Default::default()
    }
    .with_intrinsics(&scene.k1, &scene.k2)
    .with_pose(&scene.gt_pose)
}

/// Metadata describing a planted problem, including its inlier set.
pub fn planted_metadata(pair_id: &str, problem: &PlantedProblem) -> PairMetadata {
    PairMetadata {
        inliers: Some(problem.inliers.clone()),
        ..scene_metadata(pair_id, &problem.scene)
    }
}

/// Writes `pairs` planted problems and a `manifest.toml` into `dir`.
pub fn write_planted_dataset(
    dir: &Path,
    pairs: usize,
    synthetic: &SyntheticConfig,
    config: &SpeedupConfig,
) -> std::result::Result<Manifest, FormatError> {
    std::fs::create_dir_all(dir).map_err(|source| FormatError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut manifest = Manifest::default();
    for p in 0..pairs as u64 {
        let id = format!("pair_{p:03}");
        let mut rng = trial_rng(config.seed, p, PROBLEM_STREAM);
        let problem = planted_problem(synthetic, config.correspondences, config.inlier_ratio, config.sigma, &mut rng)
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
        let csv = format!("{id}.csv");
        let toml = format!("{id}.toml");
        write_file(&dir.join(&csv), &write_correspondences(&problem.correspondences, AngleUnit::Radians))?;
        write_file(&dir.join(&toml), &planted_metadata(&id, &problem).to_toml())?;
        manifest.pairs.push(ManifestEntry {
            id,
            correspondences: csv.into(),
            metadata: Some(toml.into()),
        });
    }
    write_file(&dir.join("manifest.toml"), &manifest.to_toml())?;
    Ok(manifest)
}

/// Loads a manifest and runs it.
pub fn run_manifest(path: &Path, solvers: &[SolverKind], ransac: &RansacConfig, timing: bool) -> FormatResult<Vec<BenchmarkRow>> {
    let manifest = Manifest::load(path)?;
    Ok(run_dataset(&manifest, solvers, ransac, timing))
}
