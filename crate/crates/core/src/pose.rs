//! Canonical skeletons and per-keypoint 3D tracking.
//!
//! Each keypoint is an independent constant-velocity filter with state
//! `[x, vx, y, vy, z, vz]`, updated with its 2D pixel location in every view
//! where it is visible. No bone-length constraints are applied.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::filter::{
    kalman_predict, make_motion_model, pos_index, ukf_update, vel_index, FilterError,
    GaussianBelief, MotionModel, StateLayout,
};
use crate::geometry::{project_point, CameraModel};
use crate::tracker::{CameraId, Diagnostic, ObjectState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("unknown skeleton '{0}' (expected coco17 or panoptic15)")]
    UnknownSkeleton(String),
    #[error("invalid skeleton '{name}': {reason}")]
    InvalidSkeleton { name: String, reason: String },
}

/// One annotated 2D keypoint. `visibility` is the dataset flag (0 = absent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2d {
    pub u: f64,
    pub v: f64,
    pub visibility: f64,
}

impl Keypoint2d {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

// Stature fractions for a T-pose facing +x with lateral +y to the subject's
// left, feet at z = 0. Normalized on construction.
const COCO17: [(&str, [f64; 3]); 17] = [
    ("nose", [0.060, 0.000, 0.936]),
    ("left_eye", [0.045, 0.032, 0.952]),
    ("right_eye", [0.045, -0.032, 0.952]),
    ("left_ear", [0.000, 0.070, 0.936]),
    ("right_ear", [0.000, -0.070, 0.936]),
    ("left_shoulder", [0.000, 0.129, 0.818]),
    ("right_shoulder", [0.000, -0.129, 0.818]),
    ("left_elbow", [0.000, 0.315, 0.818]),
    ("right_elbow", [0.000, -0.315, 0.818]),
    ("left_wrist", [0.000, 0.460, 0.818]),
    ("right_wrist", [0.000, -0.460, 0.818]),
    ("left_hip", [0.000, 0.091, 0.530]),
    ("right_hip", [0.000, -0.091, 0.530]),
    ("left_knee", [0.010, 0.091, 0.285]),
    ("right_knee", [0.010, -0.091, 0.285]),
    ("left_ankle", [-0.010, 0.085, 0.039]),
    ("right_ankle", [-0.010, -0.085, 0.039]),
];

const PANOPTIC15: [(&str, [f64; 3]); 15] = [
    ("neck", [0.000, 0.000, 0.870]),
    ("nose", [0.060, 0.000, 0.936]),
    ("body_center", [0.000, 0.000, 0.530]),
    ("left_shoulder", [0.000, 0.129, 0.818]),
    ("left_elbow", [0.000, 0.315, 0.818]),
    ("left_wrist", [0.000, 0.460, 0.818]),
    ("left_hip", [0.000, 0.091, 0.530]),
    ("left_knee", [0.010, 0.091, 0.285]),
    ("left_ankle", [-0.010, 0.085, 0.039]),
    ("right_shoulder", [0.000, -0.129, 0.818]),
    ("right_elbow", [0.000, -0.315, 0.818]),
    ("right_wrist", [0.000, -0.460, 0.818]),
    ("right_hip", [0.000, -0.091, 0.530]),
    ("right_knee", [0.010, -0.091, 0.285]),
    ("right_ankle", [-0.010, -0.085, 0.039]),
];

/// Keypoint template with unit vertical extent, centered on its bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalPose {
    name: String,
    joints: Vec<String>,
    coords: Vec<Vector3<f64>>,
}

impl CanonicalPose {
    /// Built-in `coco17` or `panoptic15` template.
    pub fn builtin(name: &str) -> Result<Self, PoseError> {
        let table: &[(&str, [f64; 3])] = match name {
            "coco17" => &COCO17,
            "panoptic15" => &PANOPTIC15,
            other => return Err(PoseError::UnknownSkeleton(other.to_string())),
        };
        Self::from_raw(
            name,
            table.iter().map(|(j, _)| j.to_string()).collect(),
            table.iter().map(|(_, c)| Vector3::from(*c)).collect(),
        )
    }

    /// Normalizes arbitrary coordinates to unit height about the box center.
    pub fn from_raw(name: &str, joints: Vec<String>, raw: Vec<Vector3<f64>>) -> Result<Self, PoseError> {
        let invalid = |reason: &str| PoseError::InvalidSkeleton {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        if raw.is_empty() {
            return Err(invalid("no joints"));
        }
        if joints.len() != raw.len() {
            return Err(invalid("joint names and coordinates differ in length"));
        }
        let expected = match name {
            "coco17" => Some(17),
            "panoptic15" => Some(15),
            _ => None,
        };
        if let Some(n) = expected {
            if raw.len() != n {
                return Err(invalid(&format!("expected {n} joints, got {}", raw.len())));
            }
        }
        if !raw.iter().all(|c| c.iter().all(|v| v.is_finite())) {
            return Err(invalid("non-finite coordinate"));
        }
        let (lo, hi) = extents(&raw);
        let height = hi.z - lo.z;
        if !(height > 0.0) {
            return Err(invalid("zero vertical extent"));
        }
        let center = (lo + hi) / 2.0;
        let coords = raw.iter().map(|c| (c - center) / height).collect();
        Ok(Self { name: name.to_string(), joints, coords })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joints(&self) -> &[String] {
        &self.joints
    }

    pub fn coords(&self) -> &[Vector3<f64>] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Template placed at `center` and scaled to an ellipsoid with `half_axes`.
    ///
    /// Height spans `2c`, lateral extent spans `2b`; the depth axis keeps the
    /// template's proportions relative to height.
    pub fn place(&self, center: &Vector3<f64>, half_axes: &Vector3<f64>) -> Vec<Vector3<f64>> {
        let (lo, hi) = extents(&self.coords);
        let height_scale = 2.0 * half_axes.z;
        let lateral = hi.y - lo.y;
        let lateral_scale = if lateral > 0.0 { 2.0 * half_axes.y / lateral } else { height_scale };
        self.coords
            .iter()
            .map(|c| center + Vector3::new(c.x * height_scale, c.y * lateral_scale, c.z * height_scale))
            .collect()
    }
}

fn extents(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Gaussian belief over one keypoint's position and velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointState {
    pub belief: GaussianBelief,
}

impl KeypointState {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from_fn(|axis, _| self.belief.mean[pos_index(axis)])
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::from_fn(|axis, _| self.belief.mean[vel_index(axis)])
    }
}

/// Places the canonical pose on the object's ellipsoid; velocities copy the object's.
pub fn init_keypoints(pose: &CanonicalPose, s: &ObjectState, config: &RunConfig) -> Vec<KeypointState> {
    let velocity = s.velocity();
    let mut variances = DVector::zeros(6);
    for axis in 0..3 {
        variances[pos_index(axis)] = config.init_keypoint_pos_var;
        variances[vel_index(axis)] = config.init_keypoint_vel_var;
    }
    pose.place(&s.position(), &s.half_axes())
        .into_iter()
        .map(|p| {
            let mut mean = DVector::zeros(6);
            for axis in 0..3 {
                mean[pos_index(axis)] = p[axis];
                mean[vel_index(axis)] = velocity[axis];
            }
            KeypointState { belief: GaussianBelief { mean, covariance: DMatrix::from_diagonal(&variances) } }
        })
        .collect()
}

pub fn keypoint_motion_model(config: &RunConfig) -> Result<MotionModel, FilterError> {
    make_motion_model(config.dt, config.q_pos, 0.0, StateLayout::Keypoint)
}

/// Predicts every keypoint one step.
pub fn predict_keypoints(states: &mut [KeypointState], model: &MotionModel) -> Result<(), FilterError> {
    for s in states.iter_mut() {
        s.belief = kalman_predict(&s.belief, model)?;
    }
    Ok(())
}

fn keypoint_measurement(cam: &CameraModel) -> impl Fn(&DVector<f64>) -> Result<DVector<f64>, crate::geometry::GeometryError> + '_ {
    move |x: &DVector<f64>| {
        let p = Vector3::new(x[pos_index(0)], x[pos_index(1)], x[pos_index(2)]);
        project_point(cam, &p).map(|px| DVector::from_row_slice(px.as_slice()))
    }
}

/// Sequential per-camera updates of every keypoint for one frame.
///
/// Cameras are visited in ascending id order. A keypoint is skipped in a view
/// when it is missing, not visible, or fails to project; failures are
/// returned as diagnostics.
pub fn update_keypoints(
    states: &mut [KeypointState],
    views: &BTreeMap<CameraId, &[Keypoint2d]>,
    cams: &BTreeMap<CameraId, CameraModel>,
    config: &RunConfig,
) -> Vec<Diagnostic> {
    let noise = DMatrix::identity(2, 2) * config.r_keypoint;
    let mut diagnostics = Vec::new();
    for (camera_id, keypoints) in views {
        let Some(cam) = cams.get(camera_id) else { continue };
        if keypoints.len() != states.len() {
            diagnostics.push(Diagnostic::camera(
                *camera_id,
                format!("expected {} keypoints, got {}", states.len(), keypoints.len()),
            ));
            continue;
        }
        let h = keypoint_measurement(cam);
        for (j, (state, kp)) in states.iter_mut().zip(keypoints.iter()).enumerate() {
            if !(kp.visibility > config.visibility_threshold) || !kp.u.is_finite() || !kp.v.is_finite() {
                continue;
            }
            let z = DVector::from_row_slice(&[kp.u, kp.v]);
            match ukf_update(&state.belief, &z, &h, &noise, config.ut) {
                Ok(b) => state.belief = b,
                Err(e) => diagnostics.push(Diagnostic::keypoint(*camera_id, j, e.to_string())),
            }
        }
    }
    diagnostics
}

/// Per-frame keypoint annotations: frame → camera → keypoints.
pub type KeypointSequence = BTreeMap<u64, BTreeMap<CameraId, Vec<Keypoint2d>>>;

/// Tracks keypoints from `initial` (the state at `first_frame`) over every
/// integer frame up to the last annotated one. The first frame is updated
/// without prediction. Returns the estimated positions per frame.
pub fn track_keypoints(
    initial: Vec<KeypointState>,
    first_frame: u64,
    annotations: &KeypointSequence,
    cams: &BTreeMap<CameraId, CameraModel>,
    config: &RunConfig,
) -> Result<(Vec<(u64, Vec<Vector3<f64>>)>, Vec<Diagnostic>), FilterError> {
    let model = keypoint_motion_model(config)?;
    let mut states = initial;
    let last = annotations.keys().next_back().copied().unwrap_or(first_frame).max(first_frame);
    let mut out = Vec::new();
    let mut diagnostics = Vec::new();
    for frame in first_frame..=last {
        if frame > first_frame {
            predict_keypoints(&mut states, &model)?;
        }
        if let Some(views) = annotations.get(&frame) {
            let views: BTreeMap<CameraId, &[Keypoint2d]> =
                views.iter().map(|(c, k)| (*c, k.as_slice())).collect();
            let diags = update_keypoints(&mut states, &views, cams, config);
            diagnostics.extend(diags.into_iter().map(|d| d.at_frame(frame)));
        }
        out.push((frame, states.iter().map(KeypointState::position).collect()));
    }
    Ok((out, diagnostics))
}

/// Linear (DLT) triangulation of one point from several views. Used as a
/// reference in tests and tooling.
pub fn triangulate_dlt(views: &[(&CameraModel, Vector2<f64>)]) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    let mut a = DMatrix::zeros(2 * views.len(), 4);
    for (i, (cam, px)) in views.iter().enumerate() {
        let p = cam.projection_matrix();
        for col in 0..4 {
            a[(2 * i, col)] = px.x * p[(2, col)] - p[(0, col)];
            a[(2 * i + 1, col)] = px.y * p[(2, col)] - p[(1, col)];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (smallest, _) = svd.singular_values.argmin();
    let x = v_t.row(smallest);
    (x[3].abs() > 1e-15).then(|| Vector3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn object(center: [f64; 3], velocity: [f64; 3], half_axes: [f64; 3]) -> ObjectState {
        let mut mean = DVector::zeros(9);
        for axis in 0..3 {
            mean[pos_index(axis)] = center[axis];
            mean[vel_index(axis)] = velocity[axis];
            mean[crate::filter::shape_index(axis)] = half_axes[axis].ln();
        }
        ObjectState {
            belief: GaussianBelief { mean, covariance: DMatrix::identity(9, 9) },
            keypoints: Vec::new(),
        }
    }

    #[test]
    fn builtin_skeletons_have_unit_height() {
        for (name, n) in [("coco17", 17), ("panoptic15", 15)] {
            let pose = CanonicalPose::builtin(name).unwrap();
            assert_eq!(pose.len(), n);
            assert_eq!(pose.joints().len(), n);
            let (lo, hi) = extents(pose.coords());
            assert_relative_eq!(hi.z - lo.z, 1.0, epsilon = 1e-15);
            assert_relative_eq!(hi.z + lo.z, 0.0, epsilon = 1e-15);
        }
        assert_eq!(
            CanonicalPose::builtin("h36m").unwrap_err(),
            PoseError::UnknownSkeleton("h36m".into())
        );
    }

    #[test]
    fn wrong_joint_count_is_rejected() {
        let err = CanonicalPose::from_raw("coco17", vec!["a".into()], vec![Vector3::new(0.0, 0.0, 1.0)]);
        assert!(matches!(err, Err(PoseError::InvalidSkeleton { .. })));
        let flat = CanonicalPose::from_raw("flat", vec!["a".into(), "b".into()], vec![Vector3::zeros(), Vector3::x()]);
        assert!(flat.is_err());
    }

    #[test]
    fn init_spans_ellipsoid_height() {
        let pose = CanonicalPose::builtin("coco17").unwrap();
        let s = object([0.0; 3], [0.0; 3], [0.3, 0.3, 0.9]);
        let kps = init_keypoints(&pose, &s, &RunConfig::default());
        let zs: Vec<f64> = kps.iter().map(|k| k.position().z).collect();
        let top = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bottom = zs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((top - 0.9).abs() < 1e-9);
        assert!((bottom + 0.9).abs() < 1e-9);
        let ys: Vec<f64> = kps.iter().map(|k| k.position().y).collect();
        let width = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ys.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_relative_eq!(width, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn init_copies_velocity_and_translates() {
        let pose = CanonicalPose::builtin("panoptic15").unwrap();
        let config = RunConfig::default();
        let a = init_keypoints(&pose, &object([0.0; 3], [0.5, 0.0, 0.0], [0.3, 0.3, 0.9]), &config);
        for k in &a {
            assert_eq!(k.velocity(), Vector3::new(0.5, 0.0, 0.0));
        }
        let delta = Vector3::new(2.0, -3.5, 0.25);
        let b = init_keypoints(&pose, &object([2.0, -3.5, 0.25], [0.5, 0.0, 0.0], [0.3, 0.3, 0.9]), &config);
        for (ka, kb) in a.iter().zip(&b) {
            assert_relative_eq!(kb.position() - ka.position(), delta, epsilon = 1e-12);
        }
    }

    #[test]
    fn dlt_recovers_point() {
        let cams: Vec<CameraModel> = (0..3)
            .map(|i| {
                let ang = i as f64 * 2.0;
                CameraModel::look_at(
                    800.0,
                    800.0,
                    640.0,
                    360.0,
                    Vector3::new(6.0 * ang.cos(), 6.0 * ang.sin(), 3.0),
                    Vector3::new(0.0, 0.0, 1.0),
                    (1280, 720),
                )
                .unwrap()
            })
            .collect();
        let x = Vector3::new(0.3, -0.2, 1.4);
        let views: Vec<_> = cams.iter().map(|c| (c, project_point(c, &x).unwrap())).collect();
        assert_relative_eq!(triangulate_dlt(&views).unwrap(), x, epsilon = 1e-9);
    }
}
