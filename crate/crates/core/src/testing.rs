//! Noise-free two-view scenes for unit tests.

use nalgebra::Vector3;
use rand::Rng;

use crate::constraints::consistent_feature_pair;
use crate::geometry::{
    axis_angle, CameraIntrinsics, EssentialMatrix, FundamentalMatrix, ImagePoint, RelativePose, SiftCorrespondence,
};
use crate::solvers::PointPair;

pub(crate) struct Scene {
    pub k1: CameraIntrinsics,
    pub k2: CameraIntrinsics,
    pub pose: RelativePose,
    pub essential: EssentialMatrix,
    pub fundamental: FundamentalMatrix,
    pub features: Vec<SiftCorrespondence>,
}

impl Scene {
    pub fn pairs(&self) -> Vec<PointPair> {
        self.features.iter().map(|c| c.points()).collect()
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// `n` correspondences between two cameras sharing a focal length, with
/// features exactly consistent with the true fundamental matrix.
pub(crate) fn calibrated_scene<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Scene {
    let focal = rng.random_range(600.0..1200.0);
    let k = CameraIntrinsics::simple(focal, 500.0, 500.0);
    loop {
        let rotation = axis_angle(&random_unit(rng), rng.random_range(0.05..0.5));
        let translation = random_unit(rng);
        let pose = RelativePose::new(rotation, translation).unwrap();
        let essential = EssentialMatrix::from_pose(&pose);
        let fundamental = essential.to_fundamental(&k, &k).unwrap();
        let km = k.matrix();
        let mut features = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..8.0));
            let y = rotation * x + translation;
            if y.z < 0.5 {
                ok = false;
                break;
            }
            let a = km * x;
            let b = km * y;
            let p1 = ImagePoint::new(a.x / a.z, a.y / a.z);
            let p2 = ImagePoint::new(b.x / b.z, b.y / b.z);
            match consistent_feature_pair(fundamental.matrix(), p1, p2, rng) {
                Ok(c) => features.push(c.correspondence),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Scene {
                k1: k,
                k2: k,
                pose,
                essential,
                fundamental,
                features,
            };
        }
    }
}
