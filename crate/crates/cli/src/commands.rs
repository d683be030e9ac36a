//! Command implementations.

use std::io::Write as _;
use std::path::Path;

use nalgebra::Matrix3;
use serde::Serialize;
use siftpose_core::benchmark::{
    benchmark_row, estimate_errors, ransac_speedup, run_dataset, scene_metadata, write_planted_dataset, SpeedupConfig,
};
use siftpose_core::constraints::{epipolar_row, sift_row};
use siftpose_core::geometry::{
    symmetric_epipolar_error, to_row_major, CameraIntrinsics, EssentialMatrix, SiftCorrespondence,
};
use siftpose_core::io::{
    load_correspondences, write_benchmark, write_correspondences, write_file, AngleUnit, BenchmarkRow, FormatError,
    Manifest, PairMetadata,
};
use siftpose_core::robust::{estimate, required_iterations, RansacConfig};
use siftpose_core::solvers::{hartley_transform, solve_minimal, MinimalModel, SolverKind};
use siftpose_core::synthetic::{
    focal_stability_histogram, noise_sweep, stability_histogram, trial_sample, SyntheticConfig,
};

use crate::args::{
    BenchDatasetArgs, BenchSyntheticArgs, Experiment, GenerateDatasetArgs, GenerateSampleArgs, Problem, RansacArgs,
    SolveArgs,
};
use crate::error::CliError;

/// Column order of the stability and focal-stability CSVs.
pub const STABILITY_COLUMNS: [&str; 3] = ["trial", "solver", "log10_error"];
/// Column order of the noise CSV.
pub const NOISE_COLUMNS: [&str; 6] = ["sigma", "solver", "mean_error", "median_error", "failures", "trials"];
/// Column order of the speedup CSV.
pub const SPEEDUP_COLUMNS: [&str; 9] = [
    "inlier_ratio",
    "solver",
    "mean_models_scored",
    "mean_wall_ms",
    "mean_iterations",
    "median_rot_err_deg",
    "median_trans_err_deg",
    "failures",
    "problems",
];

/// The SIFT rows used by 4-SIFT: those of the first three correspondences.
const F4SIFT_FEATURE_ROWS: usize = 3;

fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => Ok(write_file(p, text)?),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Parse(format!("stdout: {e}"))),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes to JSON");
    s.push('\n');
    s
}

fn needs_intrinsics(kind: SolverKind) -> bool {
    !matches!(kind, SolverKind::F4Sift | SolverKind::F7pt)
}

/// Intrinsics from the metadata file; identity for the fundamental problems
/// when no metadata is given.
fn load_intrinsics(
    kind: SolverKind,
    meta: Option<&PairMetadata>,
) -> Result<(Option<CameraIntrinsics>, Option<CameraIntrinsics>), CliError> {
    match meta {
        Some(m) if needs_intrinsics(kind) || (m.k1.is_some() && m.k2.is_some()) => {
            Ok((Some(m.intrinsics1()?), Some(m.intrinsics2()?)))
        }
        None if needs_intrinsics(kind) => Err(CliError::Usage(format!("{kind} needs --meta with the intrinsics"))),
        _ => Ok((None, None)),
    }
}

fn load_meta(path: Option<&Path>) -> Result<Option<PairMetadata>, CliError> {
    path.map(PairMetadata::load).transpose().map_err(CliError::from)
}

fn check_sample_size(kind: SolverKind, got: usize, exact: bool) -> Result<(), CliError> {
    let m = kind.sample_size();
    if (exact && got != m) || got < m {
        let need = if exact { "exactly" } else { "at least" };
        return Err(CliError::Usage(format!("{kind} needs {need} {m} correspondences, got {got}")));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SolveReport {
    problem: &'static str,
    sample_size: usize,
    solutions: Vec<Solution>,
}

#[derive(Debug, Serialize)]
struct Solution {
    /// Unit Frobenius norm, row-major.
    fundamental: [f64; 9],
    essential: Option<[f64; 9]>,
    focal: Option<f64>,
    /// Largest of the epipolar and feature residuals.
    residual: f64,
    /// Largest normalized algebraic epipolar residual over the sample, in
    /// Hartley-normalized coordinates.
    epipolar_residual: f64,
    /// Largest normalized SIFT-row residual over the rows the solver uses.
    feature_residual: Option<f64>,
    /// Largest symmetric epipolar error over the sample, in pixels.
    epipolar_error_px: f64,
    det: f64,
    /// Trace-constraint residual of the calibrated model.
    trace_residual: Option<f64>,
}

/// Sample and unit-norm fundamental matrix in Hartley-normalized
/// coordinates, where algebraic residuals are comparable across images.
fn normalized_frame(sample: &[SiftCorrespondence], f: &Matrix3<f64>) -> (Vec<SiftCorrespondence>, [f64; 9]) {
    let firsts: Vec<_> = sample.iter().map(|c| c.first.point).collect();
    let seconds: Vec<_> = sample.iter().map(|c| c.second.point).collect();
    match (hartley_transform(&firsts), hartley_transform(&seconds)) {
        (Some(t1), Some(t2)) => {
            let fn_ = t2.inverse_matrix().transpose() * f * t1.inverse_matrix();
            let c = sample
                .iter()
                .map(|c| SiftCorrespondence::new(t1.apply_feature(&c.first), t2.apply_feature(&c.second)))
                .collect();
            (c, to_row_major(&(fn_ / fn_.norm())))
        }
        _ => (sample.to_vec(), to_row_major(f)),
    }
}

fn diagnose(kind: SolverKind, model: &MinimalModel, sample: &[SiftCorrespondence], k1: &CameraIntrinsics) -> Solution {
    let f = model.fundamental.matrix() / model.fundamental.matrix().norm();
    let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, f64::max);
    let (normalized, fr) = normalized_frame(sample, &f);
    let epipolar_residual = max(&mut normalized.iter().map(|c| {
        let (a, b) = c.points();
        epipolar_row(&a, &b).normalized_residual(&fr)
    }));
    let epipolar_error_px = max(&mut sample.iter().map(|c| {
        let (a, b) = c.points();
        symmetric_epipolar_error(&f, &a, &b)
    }));
    let feature_rows = match kind {
        SolverKind::F4Sift => F4SIFT_FEATURE_ROWS,
        k if k.uses_features() => sample.len(),
        _ => 0,
    };
    let feature_residual = (feature_rows > 0).then(|| {
        max(&mut normalized
            .iter()
            .take(feature_rows)
            .map(|c| sift_row(c).map_or(f64::INFINITY, |r| r.normalized_residual(&fr))))
    });
    let trace_residual = match (model.essential, model.focal) {
        (Some(e), _) => Some(e.trace_residual()),
        (None, Some(focal)) => {
            let k = CameraIntrinsics::simple(focal, k1.cx, k1.cy);
            Some(EssentialMatrix::from_fundamental(&model.fundamental, &k, &k).trace_residual())
        }
        _ => None,
    };
    Solution {
        fundamental: to_row_major(&f),
        essential: model.essential.map(|e| to_row_major(&(e.matrix() / e.matrix().norm()))),
        focal: model.focal,
        residual: epipolar_residual.max(feature_residual.unwrap_or(0.0)),
        epipolar_residual,
        feature_residual,
        epipolar_error_px,
        det: f.determinant(),
        trace_residual,
    }
}

pub fn solve(args: &SolveArgs) -> Result<(), CliError> {
    let kind = SolverKind::from(args.problem);
    let sample = load_correspondences(&args.input)?;
    check_sample_size(kind, sample.len(), true)?;
    let meta = load_meta(args.meta.as_deref())?;
    let (k1, k2) = load_intrinsics(kind, meta.as_ref())?;
    let identity = CameraIntrinsics::identity();
    let (k1, k2) = (k1.unwrap_or(identity), k2.unwrap_or(identity));
    let models = solve_minimal(kind, &sample, &k1, &k2)?;
    if models.is_empty() {
        return Err(CliError::Degenerate(format!("{kind} found no real solution")));
    }
    let report = SolveReport {
        problem: kind.id(),
        sample_size: sample.len(),
        solutions: models.iter().map(|m| diagnose(kind, m, &sample, &k1)).collect(),
    };
    emit(args.output.as_deref(), &to_json(&report))
}

#[derive(Debug, Serialize)]
struct RansacOutput {
    #[serde(flatten)]
    row: BenchmarkRow,
    lo_rounds: usize,
    score: f64,
    fundamental: Option<[f64; 9]>,
    essential: Option<[f64; 9]>,
    focal: Option<f64>,
    /// Fraction of the planted inliers listed in the metadata that were recovered.
    planted_recall: Option<f64>,
    inlier_indices: Vec<usize>,
    warning: Option<String>,
}

pub fn ransac(args: &RansacArgs) -> Result<(), CliError> {
    let kind = SolverKind::from(args.problem);
    let correspondences = load_correspondences(&args.input)?;
    check_sample_size(kind, correspondences.len(), false)?;
    let meta = load_meta(args.meta.as_deref())?;
    let (k1, k2) = load_intrinsics(kind, meta.as_ref())?;
    let config = RansacConfig {
        confidence: args.confidence,
        max_iterations: args.max_iters,
        threshold: args.threshold,
        lo_enabled: args.lo.is_on(),
        seed: args.seed,
    };
    let identity = CameraIntrinsics::identity();
    let est = estimate(
        kind,
        &correspondences,
        k1.as_ref().unwrap_or(&identity),
        k2.as_ref().unwrap_or(&identity),
        &config,
    )?;
    let errors = estimate_errors(
        &est,
        &correspondences,
        k1.as_ref(),
        k2.as_ref(),
        meta.as_ref().and_then(|m| m.ground_truth_pose()).as_ref(),
        meta.as_ref().and_then(|m| m.focal),
    );
    let pair_id = meta
        .as_ref()
        .and_then(|m| m.pair_id.clone())
        .or_else(|| args.input.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    let row = benchmark_row(&pair_id, &est, &errors, args.timing.is_on());

    let ratio = est.inliers.len() as f64 / correspondences.len() as f64;
    let needed = required_iterations(ratio, kind.sample_size(), args.confidence);
    let warning = if !est.is_success() {
        Some(format!("no model found in {} iterations", est.iterations))
    } else if est.iterations >= args.max_iters && needed > est.iterations as f64 {
        Some(format!(
            "iteration cap {} reached before the confidence bound ({needed} iterations at inlier ratio {ratio})",
            args.max_iters
        ))
    } else {
        None
    };
    let planted_recall = meta.as_ref().and_then(|m| m.inliers.as_ref()).map(|planted| {
        let found = planted.iter().filter(|i| est.inliers.binary_search(i).is_ok()).count();
        found as f64 / planted.len().max(1) as f64
    });
    let output = RansacOutput {
        row,
        lo_rounds: est.lo_rounds,
        score: est.score,
        fundamental: est.fundamental.map(|f| to_row_major(&(f.matrix() / f.matrix().norm()))),
        essential: est.essential.map(|e| to_row_major(&(e.matrix() / e.matrix().norm()))),
        focal: est.focal,
        planted_recall,
        inlier_indices: est.inliers.clone(),
        warning,
    };
    if let Some(w) = &output.warning {
        eprintln!("warning: {w}");
    }
    emit(args.output.as_deref(), &to_json(&output))?;
    if est.is_success() {
        Ok(())
    } else {
        Err(CliError::Degenerate(format!("{kind} found no model")))
    }
}

fn selected(solvers: &[Problem], default: &[SolverKind]) -> Vec<SolverKind> {
    let mut out: Vec<SolverKind> = Vec::new();
    for kind in solvers.iter().map(|&p| SolverKind::from(p)) {
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    if out.is_empty() {
        default.to_vec()
    } else {
        out
    }
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv output is utf-8")
}

fn write_output(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| FormatError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    write_file(&path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn optional(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn bench_synthetic(args: &BenchSyntheticArgs) -> Result<(), CliError> {
    let synthetic = SyntheticConfig {
        seed: args.seed,
        noise_sigma: args.sigma,
        ..SyntheticConfig::default()
    };
    match args.experiment {
        Experiment::Stability | Experiment::FocalStability => {
            let focal = args.experiment == Experiment::FocalStability;
            let solvers = if focal {
                selected(&args.solvers, &[SolverKind::FF3Sift, SolverKind::FF6pt])
            } else {
                selected(&args.solvers, &SolverKind::ALL)
            };
            let mut rows = Vec::new();
            for &solver in &solvers {
                let report = if focal {
                    focal_stability_histogram(solver, &synthetic, args.trials)?
                } else {
                    stability_histogram(solver, &synthetic, args.trials)?
                };
                eprintln!(
                    "{solver}: median {} p99 {} failure rate {}",
                    report.median(),
                    report.percentile(99.0),
                    report.failure_rate()
                );
                rows.extend(
                    report
                        .log_errors
                        .iter()
                        .enumerate()
                        .map(|(t, e)| vec![t.to_string(), solver.id().to_string(), optional(*e)]),
                );
            }
            let name = if focal { "focal_stability.csv" } else { "stability.csv" };
            write_output(&args.out_dir, name, &csv_text(&STABILITY_COLUMNS, rows))
        }
        Experiment::Noise => {
            let solvers = selected(&args.solvers, &SolverKind::ALL);
            let rows = noise_sweep(&solvers, &args.sigmas, &synthetic, args.trials)?;
            let rows = rows.iter().map(|r| {
                vec![
                    r.sigma.to_string(),
                    r.solver.id().to_string(),
                    r.mean_error.to_string(),
                    r.median_error.to_string(),
                    r.failures.to_string(),
                    r.trials.to_string(),
                ]
            });
            write_output(&args.out_dir, "noise.csv", &csv_text(&NOISE_COLUMNS, rows))
        }
        Experiment::RansacSpeedup => {
            let solvers = selected(&args.solvers, &SolverKind::ALL);
            let mut rows = Vec::new();
            for &inlier_ratio in &args.inlier_ratios {
                let config = SpeedupConfig {
                    problems: args.trials,
                    correspondences: args.correspondences,
                    inlier_ratio,
                    sigma: args.problem_sigma,
                    seed: args.seed,
                    timing: args.timing.is_on(),
                    ..SpeedupConfig::default()
                };
                let report = ransac_speedup(&solvers, &config, &SyntheticConfig::default())?;
                rows.extend(report.rows.iter().map(|r| {
                    vec![
                        r.inlier_ratio.to_string(),
                        r.solver.id().to_string(),
                        r.mean_models_scored.to_string(),
                        r.mean_wall_ms.to_string(),
                        r.mean_iterations.to_string(),
                        r.median_rot_err_deg.to_string(),
                        r.median_trans_err_deg.to_string(),
                        r.failures.to_string(),
                        r.problems.to_string(),
                    ]
                }));
            }
            write_output(&args.out_dir, "ransac_speedup.csv", &csv_text(&SPEEDUP_COLUMNS, rows))
        }
    }
}

pub fn bench_dataset(args: &BenchDatasetArgs) -> Result<(), CliError> {
    let mut requested: Vec<Problem> = args.problem.into_iter().collect();
    requested.extend(&args.solvers);
    let solvers = selected(&requested, &[]);
    if solvers.is_empty() {
        return Err(CliError::Usage("give --problem or --solvers".to_string()));
    }
    let manifest = Manifest::load(&args.pairs)?;
    let ransac = RansacConfig {
        confidence: args.confidence,
        max_iterations: args.max_iters,
        threshold: args.threshold,
        lo_enabled: args.lo.is_on(),
        seed: args.seed,
    };
    ransac.validate()?;
    let rows = run_dataset(&manifest, &solvers, &ransac, args.timing.is_on());
    let failures = rows.iter().filter(|r| !r.is_ok()).count();
    eprintln!("{} rows, {failures} failed", rows.len());
    emit(args.out.as_deref(), &write_benchmark(&rows))
}

pub fn generate_sample(args: &GenerateSampleArgs) -> Result<(), CliError> {
    let kind = SolverKind::from(args.problem);
    let config = SyntheticConfig {
        seed: args.seed,
        noise_sigma: args.sigma,
        ..SyntheticConfig::default()
    };
    let (scene, sample) = trial_sample(kind, &config, 0)?;
    let id = args
        .output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| kind.id().to_string());
    let meta = args.meta.clone().unwrap_or_else(|| args.output.with_extension("toml"));
    write_file(&args.output, &write_correspondences(&scene.select(&sample), AngleUnit::Radians))?;
    write_file(&meta, &scene_metadata(&id, &scene).to_toml())?;
    Ok(())
}

pub fn generate_dataset(args: &GenerateDatasetArgs) -> Result<(), CliError> {
    let config = SpeedupConfig {
        correspondences: args.correspondences,
        inlier_ratio: args.inlier_ratio,
        sigma: args.sigma,
        seed: args.seed,
        ..SpeedupConfig::default()
    };
    let manifest = write_planted_dataset(&args.out_dir, args.pairs, &SyntheticConfig::default(), &config)?;
    eprintln!("wrote {} pairs to {}", manifest.pairs.len(), args.out_dir.display());
    Ok(())
}
