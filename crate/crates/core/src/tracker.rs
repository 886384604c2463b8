//! Per-object fusion of multi-camera boxes into 3D ellipsoid tracks.
//!
//! For each object: initialize from back-projected feet points at its birth
//! frame, then per frame predict with the constant-velocity model and apply
//! one UKF update per observing camera in ascending camera id, feeding each
//! posterior into the next camera's update. Frames between birth and the last
//! observation without any box are predict-only.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::RunConfig;
use crate::filter::{
    kalman_predict, make_motion_model, pos_index, shape_index, ukf_update, vel_index, FilterError,
    GaussianBelief, StateLayout,
};
use crate::geometry::{
    backproject_ground, feet_point, project_ellipsoid_to_bbox, BBox, CameraModel, Ellipsoid, GeometryError,
};
use crate::pose::{self, init_keypoints, CanonicalPose, Keypoint2d, KeypointState};

pub type ObjectId = u64;
pub type CameraId = u32;
pub type FrameIndex = u64;

/// Calibrated cameras keyed by id; iteration order is ascending id.
pub type CameraRig = BTreeMap<CameraId, CameraModel>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("object {0} has no box in any known camera")]
    NoObservation(ObjectId),
    #[error("object {object}: {source}")]
    Filter { object: ObjectId, source: FilterError },
    #[error("object {object}: initialization failed: {reason}")]
    Init { object: ObjectId, reason: String },
}

/// One annotated view of an object.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub bbox: BBox,
    pub keypoints: Option<Vec<Keypoint2d>>,
}

/// All annotations of one frame: object → camera → observation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationFrame {
    pub frame: FrameIndex,
    pub objects: BTreeMap<ObjectId, BTreeMap<CameraId, Observation>>,
}

/// Frame-sorted annotation sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    frames: BTreeMap<FrameIndex, AnnotationFrame>,
}

/// One object's observations: frame → camera → observation.
pub type ObjectSequence = BTreeMap<FrameIndex, BTreeMap<CameraId, Observation>>;

impl Annotations {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an observation; returns the previous one for the same
    /// (frame, object, camera), if any.
    pub fn insert(
        &mut self,
        frame: FrameIndex,
        object: ObjectId,
        camera: CameraId,
        obs: Observation,
    ) -> Option<Observation> {
        self.frames
            .entry(frame)
            .or_insert_with(|| AnnotationFrame { frame, objects: BTreeMap::new() })
            .objects
            .entry(object)
            .or_default()
            .insert(camera, obs)
    }

    pub fn frames(&self) -> impl Iterator<Item = &AnnotationFrame> {
        self.frames.values()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn len(&self) -> usize {
        self.frames.values().flat_map(|f| f.objects.values()).map(BTreeMap::len).sum()
    }

    pub fn object_ids(&self) -> Vec<ObjectId> {
        let mut ids: Vec<ObjectId> = self.frames.values().flat_map(|f| f.objects.keys().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn camera_ids(&self) -> Vec<CameraId> {
        let mut ids: Vec<CameraId> = self
            .frames
            .values()
            .flat_map(|f| f.objects.values())
            .flat_map(|cams| cams.keys().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn object_sequence(&self, object: ObjectId) -> ObjectSequence {
        self.frames
            .iter()
            .filter_map(|(k, f)| f.objects.get(&object).map(|views| (*k, views.clone())))
            .collect()
    }

    /// Removes every record matching the predicate.
    pub fn retain(&mut self, mut keep: impl FnMut(FrameIndex, ObjectId, CameraId) -> bool) {
        for (frame, f) in self.frames.iter_mut() {
            for (object, views) in f.objects.iter_mut() {
                views.retain(|camera, _| keep(*frame, *object, *camera));
            }
            f.objects.retain(|_, views| !views.is_empty());
        }
        self.frames.retain(|_, f| !f.objects.is_empty());
    }
}

/// Full belief over one object: ellipsoid state plus its keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    /// `[x, vx, y, vy, z, vz, log a, log b, log c]`.
    pub belief: GaussianBelief,
    pub keypoints: Vec<KeypointState>,
}

impl ObjectState {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from_fn(|axis, _| self.belief.mean[pos_index(axis)])
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::from_fn(|axis, _| self.belief.mean[vel_index(axis)])
    }

    pub fn log_half_axes(&self) -> Vector3<f64> {
        Vector3::from_fn(|axis, _| self.belief.mean[shape_index(axis)])
    }

    pub fn half_axes(&self) -> Vector3<f64> {
        self.log_half_axes().map(f64::exp)
    }
}

/// Extracted estimate for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackPoint {
    pub frame: FrameIndex,
    pub position: Vector3<f64>,
    pub half_axes: Vector3<f64>,
    pub keypoints: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub object_id: ObjectId,
    pub points: Vec<TrackPoint>,
}

/// A non-fatal event during tracking (skipped camera update, bad keypoints).
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub object_id: Option<ObjectId>,
    pub frame: Option<FrameIndex>,
    pub camera_id: Option<CameraId>,
    pub keypoint: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    pub fn camera(camera_id: CameraId, message: String) -> Self {
        Self { object_id: None, frame: None, camera_id: Some(camera_id), keypoint: None, message }
    }

    pub fn keypoint(camera_id: CameraId, keypoint: usize, message: String) -> Self {
        Self { keypoint: Some(keypoint), ..Self::camera(camera_id, message) }
    }

    pub fn at_frame(self, frame: FrameIndex) -> Self {
        Self { frame: Some(frame), ..self }
    }

    pub fn for_object(self, object_id: ObjectId) -> Self {
        Self { object_id: Some(object_id), ..self }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(o) = self.object_id {
            write!(f, "object {o} ")?;
        }
        if let Some(k) = self.frame {
            write!(f, "frame {k} ")?;
        }
        if let Some(c) = self.camera_id {
            write!(f, "camera {c} ")?;
        }
        if let Some(j) = self.keypoint {
            write!(f, "keypoint {j} ")?;
        }
        write!(f, "{}", self.message)
    }
}

/// Initial belief from the birth-frame boxes.
///
/// Feet points are back-projected to the ground and averaged over cameras;
/// the center height is the default vertical half-axis.
pub fn init_target(
    boxes: &BTreeMap<CameraId, BBox>,
    cams: &CameraRig,
    config: &RunConfig,
) -> Result<ObjectState, GeometryError> {
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    let mut last_err = None;
    for (camera_id, bbox) in boxes {
        let Some(cam) = cams.get(camera_id) else { continue };
        match backproject_ground(cam, &feet_point(bbox)) {
            Ok(g) => {
                sum += g;
                count += 1;
            }
            Err(e) => last_err = Some(e),
        }
    }
    if count == 0 {
        return Err(last_err.unwrap_or(GeometryError::PointAtInfinity));
    }
    let ground = sum / count as f64;
    let half_axes = Vector3::from(config.default_half_axes);
    let mut mean = DVector::zeros(9);
    let mut variances = DVector::zeros(9);
    let center = Vector3::new(ground.x, ground.y, half_axes.z);
    for axis in 0..3 {
        mean[pos_index(axis)] = center[axis];
        mean[shape_index(axis)] = half_axes[axis].ln();
        variances[pos_index(axis)] = config.init_pos_var;
        variances[vel_index(axis)] = config.init_vel_var;
        variances[shape_index(axis)] = config.init_shape_var;
    }
    Ok(ObjectState {
        belief: GaussianBelief { mean, covariance: DMatrix::from_diagonal(&variances) },
        keypoints: Vec::new(),
    })
}

/// Position, half-axes and keypoint positions of a state.
pub fn extract_estimates(s: &ObjectState) -> (Vector3<f64>, Vector3<f64>, Vec<Vector3<f64>>) {
    (s.position(), s.half_axes(), s.keypoints.iter().map(KeypointState::position).collect())
}

/// Box measurement function of the ellipsoid state for one camera.
pub fn bbox_measurement(cam: &CameraModel) -> impl Fn(&DVector<f64>) -> Result<DVector<f64>, GeometryError> + '_ {
    move |x: &DVector<f64>| {
        let center = Vector3::new(x[pos_index(0)], x[pos_index(1)], x[pos_index(2)]);
        let log_axes = Vector3::new(x[shape_index(0)], x[shape_index(1)], x[shape_index(2)]);
        let e = Ellipsoid::from_log_axes(center, log_axes)?;
        project_ellipsoid_to_bbox(cam, &e).map(|b| b.as_measurement())
    }
}

/// Sequential per-camera box updates for one frame.
pub fn update_with_boxes(
    belief: &GaussianBelief,
    boxes: &BTreeMap<CameraId, BBox>,
    cams: &CameraRig,
    config: &RunConfig,
) -> (GaussianBelief, Vec<Diagnostic>) {
    let noise = DMatrix::identity(4, 4) * config.r_bbox;
    let mut current = belief.clone();
    let mut diagnostics = Vec::new();
    for (camera_id, bbox) in boxes {
        let Some(cam) = cams.get(camera_id) else {
            diagnostics.push(Diagnostic::camera(*camera_id, "unknown camera".into()));
            continue;
        };
        let bbox = if config.clamp_boxes {
            let (w, h) = cam.image_size();
            bbox.clamped(w as f64, h as f64)
        } else {
            *bbox
        };
        match ukf_update(&current, &bbox.as_measurement(), bbox_measurement(cam), &noise, config.ut) {
            Ok(b) => current = b,
            Err(e) => diagnostics.push(Diagnostic::camera(*camera_id, format!("update skipped: {e}"))),
        }
    }
    (current, diagnostics)
}

/// Output of tracking one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectResult {
    pub track: Track,
    pub diagnostics: Vec<Diagnostic>,
    /// Posterior at the last frame.
    pub final_state: ObjectState,
}

fn boxes_of(views: &BTreeMap<CameraId, Observation>, cams: &CameraRig) -> BTreeMap<CameraId, BBox> {
    views
        .iter()
        .filter(|(c, _)| cams.contains_key(c))
        .map(|(c, o)| (*c, o.bbox))
        .collect()
}

fn keypoint_views(views: &BTreeMap<CameraId, Observation>) -> BTreeMap<CameraId, &[Keypoint2d]> {
    views
        .iter()
        .filter_map(|(c, o)| o.keypoints.as_deref().map(|k| (*c, k)))
        .collect()
}

/// Tracks one object over its lifetime: birth frame to last observed frame.
///
/// The birth frame is initialized and then updated with its own boxes (no
/// prediction). When `skeleton` is given, keypoints are initialized from the
/// updated birth state and tracked alongside.
pub fn track_object(
    object_id: ObjectId,
    sequence: &ObjectSequence,
    cams: &CameraRig,
    config: &RunConfig,
    skeleton: Option<&CanonicalPose>,
) -> Result<ObjectResult, TrackerError> {
    let observed: Vec<FrameIndex> = sequence
        .iter()
        .filter(|(_, views)| views.keys().any(|c| cams.contains_key(c)))
        .map(|(k, _)| *k)
        .collect();
    let (Some(&birth), Some(&last)) = (observed.first(), observed.last()) else {
        return Err(TrackerError::NoObservation(object_id));
    };
    let model = make_motion_model(config.dt, config.q_pos, config.q_shape, StateLayout::Ellipsoid)
        .map_err(|source| TrackerError::Filter { object: object_id, source })?;
    let kp_model = pose::keypoint_motion_model(config).map_err(|source| TrackerError::Filter { object: object_id, source })?;

    let birth_views = &sequence[&birth];
    let mut state = init_target(&boxes_of(birth_views, cams), cams, config)
        .map_err(|e| TrackerError::Init { object: object_id, reason: e.to_string() })?;

    let mut points = Vec::with_capacity((last - birth + 1) as usize);
    let mut diagnostics = Vec::new();
    for frame in birth..=last {
        if frame > birth {
            state.belief = kalman_predict(&state.belief, &model)
                .map_err(|source| TrackerError::Filter { object: object_id, source })?;
            pose::predict_keypoints(&mut state.keypoints, &kp_model)
                .map_err(|source| TrackerError::Filter { object: object_id, source })?;
        }
        if let Some(views) = sequence.get(&frame) {
            let (belief, diags) = update_with_boxes(&state.belief, &boxes_of(views, cams), cams, config);
            state.belief = belief;
            diagnostics.extend(diags.into_iter().map(|d| d.at_frame(frame).for_object(object_id)));
        }
        if frame == birth {
            if let Some(pose) = skeleton {
                state.keypoints = init_keypoints(pose, &state, config);
            }
        }
        if let Some(views) = sequence.get(&frame) {
            if !state.keypoints.is_empty() {
                let diags = pose::update_keypoints(&mut state.keypoints, &keypoint_views(views), cams, config);
                diagnostics.extend(diags.into_iter().map(|d| d.at_frame(frame).for_object(object_id)));
            }
        }
        let (position, half_axes, keypoints) = extract_estimates(&state);
        points.push(TrackPoint { frame, position, half_axes, keypoints });
    }
    Ok(ObjectResult { track: Track { object_id, points }, diagnostics, final_state: state })
}

/// Tracks of all objects plus per-object failures.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub tracks: Vec<Track>,
    pub diagnostics: Vec<Diagnostic>,
    pub failures: Vec<TrackerError>,
}

/// Tracks every object independently (in parallel on the current rayon
/// pool). Output is ordered by object id.
pub fn run_all(
    annotations: &Annotations,
    cams: &CameraRig,
    config: &RunConfig,
    skeleton: Option<&CanonicalPose>,
) -> RunOutput {
    let ids = annotations.object_ids();
    let results: Vec<Result<ObjectResult, TrackerError>> = ids
        .par_iter()
        .map(|id| track_object(*id, &annotations.object_sequence(*id), cams, config, skeleton))
        .collect();
    let mut out = RunOutput::default();
    for r in results {
        match r {
            Ok(res) => {
                out.tracks.push(res.track);
                out.diagnostics.extend(res.diagnostics);
            }
            Err(e) => out.failures.push(e),
        }
    }
    out
}
