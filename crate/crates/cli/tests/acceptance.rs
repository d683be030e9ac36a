//! Acceptance suite: one pass/fail line per criterion.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, SVD};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siftpose_core::benchmark::{ransac_speedup, SpeedupConfig};
use siftpose_core::constraints::{
    decomposition_residuals, legacy_combined_residual, make_consistent_sift, sift_row,
};
use siftpose_core::geometry::{
    CameraIntrinsics, FundamentalMatrix, ImagePoint, SiftCorrespondence, SiftFeature,
};
use siftpose_core::solvers::{solve_minimal, MinimalModel, SolverKind};
use siftpose_core::synthetic::{
    focal_stability_histogram, noise_sweep, stability_histogram, trial_sample, SyntheticConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_fundamental(rng: &mut ChaCha8Rng) -> FundamentalMatrix {
    FundamentalMatrix::new(Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))).rank2_projected()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

fn constraint_elimination() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut exact, mut perturbed) = (Vec::new(), Vec::new());
    for _ in 0..10_000 {
        let f = random_fundamental(&mut rng);
        let fv = f.to_row_major();
        let inst = make_consistent_sift(&f, &mut rng).expect("consistent instance");
        exact.push(sift_row(&inst.correspondence).unwrap().normalized_residual(&fv));
        let mut bent = inst.correspondence;
        bent.second.angle += 1e-3;
        perturbed.push(sift_row(&bent).unwrap().normalized_residual(&fv));
    }
    let elapsed = start.elapsed();
    let worst = exact.iter().cloned().fold(0.0, f64::max);
    let bent = median(perturbed);
    outcome(
        worst < 1e-10 && bent > 1e-5 && elapsed < Duration::from_secs(10),
        format!("max residual {worst:.2e}, perturbed median {bent:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn solver_stability() -> Outcome {
    let start = Instant::now();
    let config = SyntheticConfig::default();
    let f = stability_histogram(SolverKind::F4Sift, &config, 10_000).unwrap();
    let e = stability_histogram(SolverKind::E3Sift, &config, 10_000).unwrap();
    let elapsed = start.elapsed();
    let pass = f.median() <= -9.0
        && f.percentile(99.0) <= -5.0
        && e.median() <= -6.0
        && e.percentile(99.0) <= -4.0
        && f.failure_rate() < 0.01
        && e.failure_rate() < 0.01
        && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "f4sift median {:.2} p99 {:.2} fail {:.4}; e3sift median {:.2} p99 {:.2} fail {:.4}; {:.1}s",
            f.median(),
            f.percentile(99.0),
            f.failure_rate(),
            e.median(),
            e.percentile(99.0),
            e.failure_rate(),
            elapsed.as_secs_f64()
        ),
    )
}

fn focal_stability() -> Outcome {
    let start = Instant::now();
    let config = SyntheticConfig::default();
    let sift = focal_stability_histogram(SolverKind::FF3Sift, &config, 2000).unwrap();
    let points = focal_stability_histogram(SolverKind::FF6pt, &config, 2000).unwrap();
    let elapsed = start.elapsed();
    outcome(
        sift.median() <= -6.0 && points.median() <= -6.0 && elapsed < Duration::from_secs(120),
        format!(
            "log10 median relative focal error ff3sift {:.2}, ff6pt {:.2}; {:.1}s",
            sift.median(),
            points.median(),
            elapsed.as_secs_f64()
        ),
    )
}

fn noise_behavior() -> Outcome {
    let sigmas = [0.0, 0.5, 1.0, 2.0];
    let rows = noise_sweep(&SolverKind::ALL, &sigmas, &SyntheticConfig::default(), 1000).unwrap();
    let mean = |solver: SolverKind, sigma: f64| {
        rows.iter()
            .find(|r| r.solver == solver && r.sigma == sigma)
            .map(|r| r.mean_error)
            .unwrap()
    };
    let mut pass = true;
    let mut detail = Vec::new();
    for solver in SolverKind::ALL {
        let means: Vec<f64> = sigmas.iter().map(|&s| mean(solver, s)).collect();
        let monotone = means.windows(2).all(|w| w[0] < w[1]);
        pass &= monotone;
        if !monotone {
            detail.push(format!("{solver} not increasing {means:?}"));
        }
    }
    let ratio = mean(SolverKind::F4Sift, 1.0) / mean(SolverKind::F7pt, 1.0);
    pass &= ratio <= 3.0;
    detail.push(format!("all means increasing in sigma: {}", detail.is_empty()));
    detail.push(format!("f4sift/f7pt mean at sigma 1: {ratio:.2}"));
    outcome(pass, detail.join("; "))
}

/// Criteria 5 and 6 share the same 500 problems.
fn sample_size_economics() -> (Outcome, Outcome) {
    let start = Instant::now();
    let solvers = [SolverKind::E3Sift, SolverKind::E5pt, SolverKind::F4Sift, SolverKind::F7pt];
    let report = ransac_speedup(&solvers, &SpeedupConfig::default(), &SyntheticConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let row = |s: SolverKind| report.rows.iter().find(|r| r.solver == s).unwrap();
    let (e3, e5, f4, f7) = (
        row(SolverKind::E3Sift),
        row(SolverKind::E5pt),
        row(SolverKind::F4Sift),
        row(SolverKind::F7pt),
    );
    let e_models = e5.mean_models_scored / e3.mean_models_scored;
    let e_time = e5.mean_wall_ms / e3.mean_wall_ms;
    let f_models = f7.mean_models_scored / f4.mean_models_scored;
    let f_time = f7.mean_wall_ms / f4.mean_wall_ms;
    let economics = outcome(
        e_models >= 2.0 && e_time >= 1.5 && f_models >= 1.3 && f_time >= 1.3 && elapsed < Duration::from_secs(300),
        format!(
            "e5pt/e3sift models {e_models:.2} time {e_time:.2}; f7pt/f4sift models {f_models:.2} time {f_time:.2}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    let e_gap = (e3.median_rot_err_deg - e5.median_rot_err_deg).abs();
    let f_gap = (f4.median_rot_err_deg - f7.median_rot_err_deg).abs();
    let parity = outcome(
        e_gap <= 0.3 && f_gap <= 0.3,
        format!(
            "median rotation error e3sift {:.3} vs e5pt {:.3}, f4sift {:.3} vs f7pt {:.3} (deg)",
            e3.median_rot_err_deg, e5.median_rot_err_deg, f4.median_rot_err_deg, f7.median_rot_err_deg
        ),
    );
    (economics, parity)
}

fn legacy_gap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_legacy: f64 = 0.0;
    let mut least_circle = f64::INFINITY;
    for _ in 0..1000 {
        let f = random_fundamental(&mut rng);
        let inst = make_consistent_sift(&f, &mut rng).unwrap();
        let a = inst.affine.matrix();
        // a scale-ratio shift by eps moves the circle residuals along (-sin a2, -cos a2) eps
        let eps = rng.random_range(0.05..0.5);
        let mut bent = inst.correspondence;
        bent.second.scale += eps * bent.first.scale;
        let r = decomposition_residuals(&a, &bent);
        worst_legacy = worst_legacy.max(legacy_combined_residual(&a, &bent).abs());
        least_circle = least_circle.min(r[1].hypot(r[2]));
    }
    outcome(
        worst_legacy < 1e-12 && least_circle > 1e-2,
        format!("legacy residual at most {worst_legacy:.2e} while circle residual norm at least {least_circle:.3}"),
    )
}

fn run_cli(threads: usize, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_siftpose"))
        .env("SIFTPOSE_THREADS", threads.to_string())
        .args(args)
        .output()
        .expect("binary runs");
    let mut bytes = out.status.code().unwrap_or(-1).to_le_bytes().to_vec();
    bytes.extend(out.stdout);
    bytes
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let f = |name: &str| fixtures.join(name).to_string_lossy().into_owned();
    let (clean, clean_meta) = (f("e3sift_clean.csv"), f("e3sift_clean.toml"));
    let (planted, planted_meta) = (f("planted60.csv"), f("planted60.toml"));
    let manifest = f("mini/manifest.toml");
    let stdout_commands: Vec<Vec<&str>> = vec![
        vec!["solve", "--problem", "e3sift", "--input", &clean, "--meta", &clean_meta],
        vec!["ransac", "--problem", "e3sift", "--input", &planted, "--meta", &planted_meta, "--seed", "4"],
        vec!["ransac", "--problem", "f4sift", "--input", &planted, "--seed", "4", "--max-iters", "1"],
        vec!["ransac", "--problem", "ff3sift", "--input", &planted, "--meta", &planted_meta, "--seed", "4"],
        vec!["bench-dataset", "--pairs", &manifest, "--solvers", "f4sift,f7pt,e3sift,e5pt", "--seed", "4"],
    ];
    let file_commands: Vec<Vec<&str>> = vec![
        vec!["bench-synthetic", "--experiment", "stability", "--trials", "300", "--seed", "4"],
        vec!["bench-synthetic", "--experiment", "focal-stability", "--trials", "100", "--seed", "4"],
        vec!["bench-synthetic", "--experiment", "noise", "--trials", "100", "--seed", "4"],
        vec!["bench-synthetic", "--experiment", "ransac-speedup", "--trials", "10", "--seed", "4"],
        vec!["generate", "dataset", "--pairs", "3", "--seed", "4"],
    ];
    let mut failures = Vec::new();
    let mut runs = 0;
    for args in &stdout_commands {
        let reference = run_cli(1, args);
        for threads in [1, 4] {
            runs += 1;
            if run_cli(threads, args) != reference {
                failures.push(format!("{} with {threads} workers", args[..2].join(" ")));
            }
        }
    }
    for args in &file_commands {
        let mut outputs = Vec::new();
        for threads in [1, 1, 4] {
            let dir = tempfile::tempdir().unwrap();
            let target = dir.path().to_string_lossy().into_owned();
            let mut full = args.clone();
            full.extend(["--out-dir", &target]);
            let code = run_cli(threads, &full);
            outputs.push((code, dir_contents(dir.path())));
        }
        runs += 2;
        if outputs.iter().any(|o| *o != outputs[0]) || outputs[0].1.is_empty() {
            failures.push(args[..3].join(" "));
        }
    }
    {
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let csv = dir.path().join("sample.csv").to_string_lossy().into_owned();
            run_cli(1, &["generate", "sample", "--problem", "ff3sift", "--seed", "4", "--output", &csv]);
            let toml = Path::new(&csv).with_extension("toml");
            outputs.push((std::fs::read(&csv).unwrap(), std::fs::read(toml).unwrap()));
        }
        runs += 1;
        if outputs[0] != outputs[1] {
            failures.push("generate sample".to_string());
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{runs} repeated runs bitwise identical across 1 and 4 workers")
        } else {
            format!("differing output: {}", failures.join(", "))
        },
    )
}

fn runner() -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases: 1000,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn unit(m: &Matrix3<f64>) -> Matrix3<f64> {
    m / m.norm()
}

fn singular_values(m: &Matrix3<f64>) -> [f64; 3] {
    let mut s: Vec<f64> = SVD::new(unit(m), false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    [s[0], s[1], s[2]]
}

fn check_model(kind: SolverKind, m: &MinimalModel) -> Result<(), TestCaseError> {
    let s = singular_values(m.fundamental.matrix());
    prop_assert!(s[2] < 1e-10 * s[0], "{kind}: F not rank two {s:?}");
    if let Some(e) = m.essential {
        let s = singular_values(e.matrix());
        prop_assert!((s[0] - s[1]).abs() < 1e-8 * s[0] && s[2] < 1e-10 * s[0], "{kind}: E spectrum {s:?}");
    }
    if matches!(kind, SolverKind::FF3Sift | SolverKind::FF6pt) {
        prop_assert!(m.focal.is_some_and(|f| f > 0.0 && f.is_finite()), "{kind}: focal {:?}", m.focal);
    }
    Ok(())
}

fn model_postconditions() -> Result<(), String> {
    runner()
        .run(&(any::<u64>(), 0.0..2.0f64), |(seed, sigma)| {
            for kind in SolverKind::ALL {
                let config = SyntheticConfig {
                    seed,
                    noise_sigma: sigma,
                    ..SyntheticConfig::default()
                };
                let (scene, sample) = trial_sample(kind, &config, 0).unwrap();
                let once = solve_minimal(kind, &scene.select(&sample), &scene.k1, &scene.k2);
                let again = solve_minimal(kind, &scene.select(&sample), &scene.k1, &scene.k2);
                prop_assert_eq!(&once, &again);
                for m in once.iter().flatten() {
                    check_model(kind, m)?;
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn random_feature() -> impl Strategy<Value = SiftFeature> {
    (-2000.0..2000.0f64, -2000.0..2000.0f64, 0.0..std::f64::consts::TAU, 0.01..100.0f64)
        .prop_map(|(u, v, a, q)| SiftFeature::new(ImagePoint::new(u, v), a, q).unwrap())
}

fn random_correspondence() -> impl Strategy<Value = SiftCorrespondence> {
    (random_feature(), random_feature()).prop_map(|(a, b)| SiftCorrespondence::new(a, b))
}

fn sift_row_last_entry() -> Result<(), String> {
    runner()
        .run(&random_correspondence(), |c| {
            prop_assert_eq!(sift_row(&c).unwrap().0[8], 0.0);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn scale_homogeneity() -> Result<(), String> {
    runner()
        .run(&(random_correspondence(), 1e-3..1e3f64), |(c, lambda)| {
            let mut scaled = c;
            scaled.first.scale *= lambda;
            scaled.second.scale *= lambda;
            let (a, b) = (sift_row(&c).unwrap(), sift_row(&scaled).unwrap());
            let norm = a.norm();
            for (x, y) in a.0.iter().zip(b.0) {
                prop_assert!((x - y).abs() <= 1e-12 * norm, "{:?} vs {:?}", a.0, b.0);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn shifted(k: &CameraIntrinsics, du: f64, dv: f64) -> CameraIntrinsics {
    CameraIntrinsics::new(k.fx, k.fy, k.cx + du, k.cy + dv, k.skew)
}

fn translation_equivariance() -> Result<(), String> {
    runner()
        .run(&(any::<u64>(), -500.0..500.0f64, -500.0..500.0f64), |(seed, du, dv)| {
            for kind in SolverKind::ALL {
                let config = SyntheticConfig {
                    seed,
                    ..SyntheticConfig::default()
                };
                let (scene, sample) = trial_sample(kind, &config, 0).unwrap();
                let sample = scene.select(&sample);
                let moved: Vec<SiftCorrespondence> = sample
                    .iter()
                    .map(|c| {
                        let mut m = *c;
                        m.first.point = ImagePoint::new(c.first.point.u + du, c.first.point.v + dv);
                        m.second.point = ImagePoint::new(c.second.point.u + du, c.second.point.v + dv);
                        m
                    })
                    .collect();
                let Ok(base) = solve_minimal(kind, &sample, &scene.k1, &scene.k2) else { continue };
                let out = solve_minimal(kind, &moved, &shifted(&scene.k1, du, dv), &shifted(&scene.k2, du, dv))
                    .map_err(|e| TestCaseError::fail(format!("{kind}: translated sample failed: {e}")))?;
                let t = Matrix3::new(1.0, 0.0, du, 0.0, 1.0, dv, 0.0, 0.0, 1.0);
                let ti = t.try_inverse().unwrap();
                for m in &base {
                    let expected = FundamentalMatrix::new(ti.transpose() * m.fundamental.matrix() * ti);
                    let best = out
                        .iter()
                        .map(|o| o.fundamental.distance(&expected))
                        .fold(f64::INFINITY, f64::min);
                    prop_assert!(best < 1e-6, "{kind}: distance {best:e}");
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

type Check = fn() -> Result<(), String>;

fn structural_invariants() -> Outcome {
    let checks: [(&str, Check); 4] = [
        ("model postconditions", model_postconditions),
        ("sift_row last entry", sift_row_last_entry),
        ("scale homogeneity", scale_homogeneity),
        ("translation equivariance", translation_equivariance),
    ];
    let mut failures = Vec::new();
    for (name, check) in checks {
        if let Err(e) = check() {
            failures.push(format!("{name}: {e}"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "4 properties held over 1000 random inputs each".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let (economics, parity) = sample_size_economics();
    let results = [
        ("constraint elimination oracle", constraint_elimination()),
        ("solver stability", solver_stability()),
        ("focal stability", focal_stability()),
        ("noise behavior", noise_behavior()),
        ("sample-size economics", economics),
        ("pose accuracy parity", parity),
        ("legacy-constraint gap", legacy_gap()),
        ("determinism", determinism()),
        ("structural invariants", structural_invariants()),
    ];
    let mut all = true;
    for (i, (name, o)) in results.iter().enumerate() {
        all &= o.pass;
        println!("criterion {} {}: {} ({})", i + 1, if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
    }
    if !all {
        std::process::exit(1);
    }
}
