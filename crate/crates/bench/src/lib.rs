//! Fixed inputs shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use siftpose_core::benchmark::{planted_problem, PlantedProblem};
use siftpose_core::geometry::{CameraIntrinsics, SiftCorrespondence};
use siftpose_core::solvers::SolverKind;
use siftpose_core::synthetic::{trial_sample, SyntheticConfig};

/// A noise-free minimal sample with the intrinsics of its scene.
pub struct MinimalInput {
    pub sample: Vec<SiftCorrespondence>,
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
}

pub fn minimal_input(kind: SolverKind, trial: u64) -> MinimalInput {
    let (scene, indices) = trial_sample(kind, &SyntheticConfig::default(), trial).expect("default scene is valid");
    MinimalInput {
        sample: scene.select(&indices),
        k1: scene.k1,
        k2: scene.k2,
    }
}

/// A planted problem with `total` correspondences at the given inlier ratio
/// and 0.5 px noise.
pub fn planted(total: usize, inlier_ratio: f64, seed: u64) -> PlantedProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    planted_problem(&SyntheticConfig::default(), total, inlier_ratio, 0.5, &mut rng).expect("valid planted problem")
}
