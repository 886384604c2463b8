//! Shared scene helpers for the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use mvfuse::geometry::{project_ellipsoid_to_bbox, project_point, CameraModel, Ellipsoid};
use mvfuse::metrics::{TrackSample, TrackSet};
use mvfuse::pose::{CanonicalPose, Keypoint2d};
use mvfuse::tracker::{Annotations, CameraId, CameraRig, FrameIndex, ObjectId, Observation};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera `radius` meters from the origin at `height`, looking at a point
/// near the origin, with random focal length.
pub fn random_camera(rng: &mut ChaCha8Rng, radius: std::ops::Range<f64>, height: std::ops::Range<f64>) -> CameraModel {
    let ang = rng.random_range(0.0..2.0 * PI);
    let r = rng.random_range(radius);
    let eye = Vector3::new(r * ang.cos(), r * ang.sin(), rng.random_range(height));
    let target = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0));
    let f = rng.random_range(600.0..2000.0);
    CameraModel::look_at(f, f * rng.random_range(0.95..1.05), 960.0, 540.0, eye, target, (1920, 1080)).unwrap()
}

/// `n` cameras evenly spaced on a circle, looking at (0, 0, 0.9).
pub fn ring(n: usize, radius: f64, height: f64) -> CameraRig {
    (0..n)
        .map(|i| {
            let ang = 2.0 * PI * i as f64 / n as f64 + 0.3;
            let eye = Vector3::new(radius * ang.cos(), radius * ang.sin(), height);
            let cam =
                CameraModel::look_at(1000.0, 1000.0, 960.0, 540.0, eye, Vector3::new(0.0, 0.0, 0.9), (1920, 1080))
                    .unwrap();
            (i as CameraId, cam)
        })
        .collect()
}

/// Known object motion: center per frame and fixed half-axes.
pub struct Scripted {
    pub id: ObjectId,
    pub half_axes: Vector3<f64>,
    pub centers: Vec<(FrameIndex, Vector3<f64>)>,
}

impl Scripted {
    pub fn linear(id: ObjectId, start: Vector3<f64>, velocity: Vector3<f64>, dt: f64, frames: std::ops::Range<u64>) -> Self {
        let first = frames.start;
        Self {
            id,
            half_axes: Vector3::new(0.3, 0.25, 0.9),
            centers: frames.map(|k| (k, start + velocity * ((k - first) as f64 * dt))).collect(),
        }
    }
}

/// Noiseless boxes (and keypoints for `skeleton`) of every object in every camera.
pub fn render(cams: &CameraRig, objects: &[Scripted], skeleton: Option<&CanonicalPose>) -> (Annotations, TrackSet) {
    let mut ann = Annotations::new();
    let mut truth = TrackSet::new();
    for obj in objects {
        for (frame, center) in &obj.centers {
            let kps3 = skeleton.map(|p| p.place(center, &obj.half_axes)).unwrap_or_default();
            truth.insert(
                obj.id,
                *frame,
                TrackSample { position: *center, half_axes: Some(obj.half_axes), keypoints: kps3.clone() },
            );
            let e = Ellipsoid::new(*center, obj.half_axes).unwrap();
            for (cid, cam) in cams {
                let bbox = project_ellipsoid_to_bbox(cam, &e).unwrap();
                let keypoints = skeleton.map(|_| {
                    kps3.iter()
                        .map(|p| {
                            let px = project_point(cam, p).unwrap();
                            Keypoint2d { u: px.x, v: px.y, visibility: 1.0 }
                        })
                        .collect()
                });
                ann.insert(*frame, obj.id, *cid, Observation { bbox, keypoints });
            }
        }
    }
    (ann, truth)
}

/// Rigid motion applied to every position and keypoint.
pub fn transform(set: &TrackSet, rot: &nalgebra::Rotation3<f64>, shift: &Vector3<f64>) -> TrackSet {
    set.map_samples(|s| TrackSample {
        position: rot * s.position + shift,
        half_axes: s.half_axes,
        keypoints: s.keypoints.iter().map(|k| rot * k + shift).collect(),
    })
}

/// Box of `n` quasi-uniform surface samples (Fibonacci sphere mapped onto the ellipsoid).
pub fn sampled_box(cam: &CameraModel, e: &Ellipsoid, n: usize) -> [f64; 4] {
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for i in 0..n {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let theta = z.acos();
        let phi = golden * i as f64;
        let px = project_point(cam, &e.surface_point(theta, phi)).unwrap();
        b[0] = b[0].min(px.x);
        b[1] = b[1].min(px.y);
        b[2] = b[2].max(px.x);
        b[3] = b[3].max(px.y);
    }
    b
}

/// Random symmetric positive definite matrix with eigenvalues roughly in [0.1, 5].
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> nalgebra::DMatrix<f64> {
    let a = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + nalgebra::DMatrix::identity(d, d) * 0.1
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, d: usize) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0))
}

/// Closed-form linear Kalman update, the reference for the unscented update.
pub fn linear_kalman_update(
    mean: &nalgebra::DVector<f64>,
    cov: &nalgebra::DMatrix<f64>,
    z: &nalgebra::DVector<f64>,
    h: &nalgebra::DMatrix<f64>,
    noise: &nalgebra::DMatrix<f64>,
) -> (nalgebra::DVector<f64>, nalgebra::DMatrix<f64>) {
    let s = h * cov * h.transpose() + noise;
    let k = cov * h.transpose() * s.clone().try_inverse().unwrap();
    let m = mean + &k * (z - h * mean);
    let d = mean.len();
    let p = (nalgebra::DMatrix::identity(d, d) - &k * h) * cov;
    (m, (&p + p.transpose()) * 0.5)
}

pub fn max_abs(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}
