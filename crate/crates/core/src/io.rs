//! File formats: calibration and config (JSON documents), annotations and
//! tracks (JSON Lines), optional skeleton definitions.
//!
//! Units are meters and pixels. Millimeter inputs are converted on load
//! with [`Units::Millimeters`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::geometry::{orthonormality_error, BBox, CameraModel};
use crate::metrics::{TrackSample, TrackSet};
use crate::pose::{CanonicalPose, Keypoint2d};
use crate::tracker::{Annotations, CameraId, CameraRig, FrameIndex, ObjectId, Observation, Track};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}:{line}: {reason}")]
    Parse { file: String, line: usize, reason: String },
    #[error("invalid {entity}: {rule}")]
    Validation { entity: String, rule: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    fn validation(entity: impl Into<String>, rule: impl Into<String>) -> Self {
        IoError::Validation { entity: entity.into(), rule: rule.into() }
    }

    fn from_json(file: &str, e: serde_json::Error) -> Self {
        IoError::Parse { file: file.to_string(), line: e.line(), reason: e.to_string() }
    }
}

/// Length unit of metric inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Units {
    #[default]
    Meters,
    Millimeters,
}

impl Units {
    /// Factor converting this unit to meters.
    pub fn to_meters(self) -> f64 {
        match self {
            Units::Meters => 1.0,
            Units::Millimeters => 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: CameraId,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub cameras: Vec<CameraRecord>,
}

impl CameraRecord {
    pub fn from_camera(id: CameraId, cam: &CameraModel) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[3 * r + c] = m[(r, c)];
                }
            }
            out
        };
        let t = cam.translation();
        let (width, height) = cam.image_size();
        Self { id, k: row_major(cam.intrinsics()), r: row_major(cam.rotation()), t: [t.x, t.y, t.z], width, height }
    }

    pub fn to_camera(&self, units: Units) -> Result<CameraModel, IoError> {
        let entity = format!("camera {}", self.id);
        let k = Matrix3::from_row_slice(&self.k);
        let r = Matrix3::from_row_slice(&self.r);
        let ortho = orthonormality_error(&r);
        if !(ortho < 1e-9) {
            return Err(IoError::validation(entity, format!("rotation is not orthonormal: max|R^T R - I| = {ortho:e}")));
        }
        let t = Vector3::from(self.t) * units.to_meters();
        CameraModel::new(k, r, t, (self.width, self.height)).map_err(|e| IoError::validation(entity, e.to_string()))
    }
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|e| IoError::io(path, e))
}

fn read_document(path: &Path) -> Result<String, IoError> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| IoError::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| IoError::Parse {
        file: path.display().to_string(),
        line: 0,
        reason: format!("not valid UTF-8: {e}"),
    })
}

pub fn parse_calibration(text: &str, file: &str, units: Units) -> Result<CameraRig, IoError> {
    let doc: CalibrationFile = serde_json::from_str(text).map_err(|e| IoError::from_json(file, e))?;
    let mut rig = CameraRig::new();
    for rec in &doc.cameras {
        let cam = rec.to_camera(units)?;
        if rig.insert(rec.id, cam).is_some() {
            return Err(IoError::validation(format!("camera {}", rec.id), "duplicate camera id"));
        }
    }
    if rig.is_empty() {
        return Err(IoError::validation("calibration", "no cameras"));
    }
    Ok(rig)
}

pub fn load_calibration(path: &Path, units: Units) -> Result<CameraRig, IoError> {
    parse_calibration(&read_document(path)?, &path.display().to_string(), units)
}

pub fn calibration_to_string(rig: &CameraRig) -> String {
    let doc = CalibrationFile { cameras: rig.iter().map(|(id, c)| CameraRecord::from_camera(*id, c)).collect() };
    serde_json::to_string_pretty(&doc).expect("calibration serializes") + "\n"
}

pub fn save_calibration(rig: &CameraRig, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, calibration_to_string(rig)).map_err(|e| IoError::io(path, e))
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub frame: FrameIndex,
    pub object_id: ObjectId,
    pub camera_id: CameraId,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<[f64; 3]>>,
}

/// Iterates non-blank lines with their 1-based numbers, failing on bad UTF-8.
fn jsonl_lines<'a, R: BufRead + 'a>(reader: R, file: &'a str) -> impl Iterator<Item = Result<(usize, String), IoError>> + 'a {
    reader.split(b'\n').enumerate().filter_map(move |(i, line)| {
        let line_no = i + 1;
        let bytes = match line {
            Ok(b) => b,
            Err(e) => {
                return Some(Err(IoError::Parse { file: file.to_string(), line: line_no, reason: e.to_string() }))
            }
        };
        match String::from_utf8(bytes) {
            Ok(s) if s.trim().is_empty() => None,
            Ok(s) => Some(Ok((line_no, s))),
            Err(_) => Some(Err(IoError::Parse {
                file: file.to_string(),
                line: line_no,
                reason: "not valid UTF-8".into(),
            })),
        }
    })
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, file: &str, line_no: usize) -> Result<T, IoError> {
    serde_json::from_str(line).map_err(|e| IoError::Parse { file: file.to_string(), line: line_no, reason: e.to_string() })
}

/// Parses annotations, validating boxes, keypoints, duplicates and camera ids.
pub fn read_annotations<R: BufRead>(reader: R, file: &str, cams: &CameraRig) -> Result<Annotations, IoError> {
    let mut out = Annotations::new();
    for item in jsonl_lines(reader, file) {
        let (line_no, line) = item?;
        let rec: AnnotationRecord = parse_line(&line, file, line_no)?;
        let at = |rule: String| IoError::Parse { file: file.to_string(), line: line_no, reason: rule };
        if !cams.contains_key(&rec.camera_id) {
            return Err(IoError::validation(
                format!("annotation at {file}:{line_no}"),
                format!("unknown camera_id {}", rec.camera_id),
            ));
        }
        let bbox = BBox::from_array(rec.bbox)
            .ok_or_else(|| at(format!("invalid bbox {:?}: need u_min <= u_max, v_min <= v_max, finite", rec.bbox)))?;
        let keypoints = match rec.keypoints {
            None => None,
            Some(kps) => {
                if kps.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(at("non-finite keypoint".into()));
                }
                Some(kps.into_iter().map(|[u, v, visibility]| Keypoint2d { u, v, visibility }).collect())
            }
        };
        if out.insert(rec.frame, rec.object_id, rec.camera_id, Observation { bbox, keypoints }).is_some() {
            return Err(IoError::validation(
                format!("annotation at {file}:{line_no}"),
                format!(
                    "duplicate record for frame {}, object {}, camera {}",
                    rec.frame, rec.object_id, rec.camera_id
                ),
            ));
        }
    }
    Ok(out)
}

pub fn load_annotations(path: &Path, cams: &CameraRig) -> Result<Annotations, IoError> {
    read_annotations(BufReader::new(open(path)?), &path.display().to_string(), cams)
}

pub fn annotation_records(ann: &Annotations) -> Vec<AnnotationRecord> {
    let mut out = Vec::with_capacity(ann.len());
    for f in ann.frames() {
        for (object_id, views) in &f.objects {
            for (camera_id, obs) in views {
                out.push(AnnotationRecord {
                    frame: f.frame,
                    object_id: *object_id,
                    camera_id: *camera_id,
                    bbox: obs.bbox.to_array(),
                    keypoints: obs
                        .keypoints
                        .as_ref()
                        .map(|k| k.iter().map(|p| [p.u, p.v, p.visibility]).collect()),
                });
            }
        }
    }
    out
}

fn write_jsonl<T: Serialize, W: Write>(records: impl IntoIterator<Item = T>, mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_annotations<W: Write>(ann: &Annotations, w: W) -> std::io::Result<()> {
    write_jsonl(annotation_records(ann), w)
}

pub fn save_annotations(ann: &Annotations, path: &Path) -> Result<(), IoError> {
    let f = File::create(path).map_err(|e| IoError::io(path, e))?;
    write_annotations(ann, BufWriter::new(f)).map_err(|e| IoError::io(path, e))
}

/// One line of a track file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub frame: FrameIndex,
    pub object_id: ObjectId,
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_axes: Option<[f64; 3]>,
    #[serde(default)]
    pub keypoints: Vec<[f64; 3]>,
}

/// Records ordered by frame, then object id.
pub fn track_records(set: &TrackSet) -> Vec<TrackRecord> {
    let mut out: Vec<TrackRecord> = set
        .tracks
        .iter()
        .flat_map(|(id, t)| {
            t.iter().map(move |(k, s)| TrackRecord {
                frame: *k,
                object_id: *id,
                position: s.position.into(),
                half_axes: s.half_axes.map(Into::into),
                keypoints: s.keypoints.iter().map(|p| (*p).into()).collect(),
            })
        })
        .collect();
    out.sort_by_key(|r| (r.frame, r.object_id));
    out
}

pub fn write_tracks<W: Write>(set: &TrackSet, w: W) -> Result<(), IoError> {
    let records = track_records(set);
    for r in &records {
        let finite = r.position.iter().chain(r.half_axes.iter().flatten()).chain(r.keypoints.iter().flatten());
        if finite.clone().any(|v| !v.is_finite()) {
            return Err(IoError::validation(
                format!("track {} frame {}", r.object_id, r.frame),
                "non-finite value cannot be serialized",
            ));
        }
    }
    write_jsonl(records, w).map_err(|e| IoError::Io { path: PathBuf::from("<writer>"), source: e })
}

pub fn save_tracks(set: &TrackSet, path: &Path) -> Result<(), IoError> {
    let f = File::create(path).map_err(|e| IoError::io(path, e))?;
    write_tracks(set, BufWriter::new(f)).map_err(|e| match e {
        IoError::Io { source, .. } => IoError::io(path, source),
        other => other,
    })
}

pub fn save_track_list(tracks: &[Track], path: &Path) -> Result<(), IoError> {
    save_tracks(&TrackSet::from_tracks(tracks), path)
}

/// Parses a track file; lengths are multiplied by `units.to_meters()`.
pub fn read_tracks<R: BufRead>(reader: R, file: &str, units: Units) -> Result<TrackSet, IoError> {
    let s = units.to_meters();
    let mut set = TrackSet::new();
    for item in jsonl_lines(reader, file) {
        let (line_no, line) = item?;
        let r: TrackRecord = parse_line(&line, file, line_no)?;
        let sample = TrackSample {
            position: Vector3::from(r.position) * s,
            half_axes: r.half_axes.map(|a| Vector3::from(a) * s),
            keypoints: r.keypoints.iter().map(|p| Vector3::from(*p) * s).collect(),
        };
        if set.insert(r.object_id, r.frame, sample).is_some() {
            return Err(IoError::validation(
                format!("track record at {file}:{line_no}"),
                format!("duplicate (object {}, frame {})", r.object_id, r.frame),
            ));
        }
    }
    Ok(set)
}

pub fn load_tracks(path: &Path, units: Units) -> Result<TrackSet, IoError> {
    read_tracks(BufReader::new(open(path)?), &path.display().to_string(), units)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonFile {
    pub name: String,
    pub joints: Vec<String>,
    pub canonical: Vec<[f64; 3]>,
}

pub fn parse_skeleton(text: &str, file: &str) -> Result<CanonicalPose, IoError> {
    let doc: SkeletonFile = serde_json::from_str(text).map_err(|e| IoError::from_json(file, e))?;
    CanonicalPose::from_raw(&doc.name, doc.joints, doc.canonical.into_iter().map(Vector3::from).collect())
        .map_err(|e| IoError::validation(format!("skeleton {file}"), e.to_string()))
}

pub fn load_skeleton(path: &Path) -> Result<CanonicalPose, IoError> {
    parse_skeleton(&read_document(path)?, &path.display().to_string())
}

pub fn parse_config(text: &str, file: &str) -> Result<RunConfig, IoError> {
    let config = parse_config_unvalidated(text, file)?;
    config.validate().map_err(|rule| IoError::validation("config", rule))?;
    Ok(config)
}

/// Parses a config without range checks, for callers that apply overrides first.
pub fn parse_config_unvalidated(text: &str, file: &str) -> Result<RunConfig, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::from_json(file, e))
}

pub fn load_config(path: &Path) -> Result<RunConfig, IoError> {
    parse_config(&read_document(path)?, &path.display().to_string())
}

pub fn load_config_unvalidated(path: &Path) -> Result<RunConfig, IoError> {
    parse_config_unvalidated(&read_document(path)?, &path.display().to_string())
}

/// Everything needed to annotate (and optionally evaluate) one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub cameras: CameraRig,
    pub annotations: Annotations,
    pub gt_tracks: Option<TrackSet>,
    pub skeleton: Option<CanonicalPose>,
}

#[derive(Debug, Clone, Default)]
pub struct ScenePaths {
    pub calibration: PathBuf,
    pub annotations: PathBuf,
    pub gt_tracks: Option<PathBuf>,
    pub skeleton: Option<PathBuf>,
}

/// Loads and cross-validates a scene.
pub fn load_scene(paths: &ScenePaths, units: Units) -> Result<SceneBundle, IoError> {
    let cameras = load_calibration(&paths.calibration, units)?;
    let annotations = load_annotations(&paths.annotations, &cameras)?;
    let gt_tracks = paths.gt_tracks.as_deref().map(|p| load_tracks(p, units)).transpose()?;
    let skeleton = paths.skeleton.as_deref().map(load_skeleton).transpose()?;
    if let Some(pose) = &skeleton {
        for f in annotations.frames() {
            for (object, views) in &f.objects {
                for (camera, obs) in views {
                    if let Some(k) = &obs.keypoints {
                        if k.len() != pose.len() {
                            return Err(IoError::validation(
                                format!("annotation frame {} object {object} camera {camera}", f.frame),
                                format!("{} keypoints but skeleton '{}' has {}", k.len(), pose.name(), pose.len()),
                            ));
                        }
                    }
                }
            }
        }
    }
    Ok(SceneBundle { cameras, annotations, gt_tracks, skeleton })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CALIB: &str = r#"{"cameras": [{"id": 0, "K": [1000,0,500, 0,1000,500, 0,0,1],
        "R": [1,0,0, 0,-1,0, 0,0,-1], "t": [0,0,10], "width": 1000, "height": 1000, "distortion": [0.1, 0]}]}"#;

    fn rig() -> CameraRig {
        parse_calibration(CALIB, "calib.json", Units::Meters).unwrap()
    }

    #[test]
    fn minimal_scene_parses() {
        let cams = rig();
        assert_eq!(cams.len(), 1);
        let line = r#"{"frame": 0, "object_id": 1, "camera_id": 0, "bbox": [10, 20, 30, 40]}"#;
        let ann = read_annotations(line.as_bytes(), "a.jsonl", &cams).unwrap();
        assert_eq!(ann.len(), 1);
        assert_eq!(ann.object_ids(), vec![1]);
    }

    #[test]
    fn unknown_camera_is_a_validation_error() {
        let line = r#"{"frame": 0, "object_id": 1, "camera_id": 4, "bbox": [10, 20, 30, 40]}"#;
        let err = read_annotations(line.as_bytes(), "a.jsonl", &rig()).unwrap_err();
        assert!(matches!(err, IoError::Validation { ref rule, .. } if rule.contains("camera_id 4")));
    }

    #[test]
    fn non_orthonormal_rotation_reports_residual() {
        let bad = CALIB.replace("[1,0,0, 0,-1,0, 0,0,-1]", "[1,0.2,0, 0,-1,0, 0,0,-1]");
        let err = parse_calibration(&bad, "c.json", Units::Meters).unwrap_err();
        match err {
            IoError::Validation { entity, rule } => {
                assert_eq!(entity, "camera 0");
                assert!(rule.contains("R^T R - I"), "{rule}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn annotation_errors_carry_line_numbers() {
        let text = "{\"frame\": 0, \"object_id\": 1, \"camera_id\": 0, \"bbox\": [10, 20, 30, 40]}\n\n{\"frame\": 1, \"object_id\": 1";
        match read_annotations(text.as_bytes(), "a.jsonl", &rig()).unwrap_err() {
            IoError::Parse { line, file, .. } => {
                assert_eq!(line, 3);
                assert_eq!(file, "a.jsonl");
            }
            other => panic!("unexpected {other:?}"),
        }
        let flipped = r#"{"frame": 0, "object_id": 1, "camera_id": 0, "bbox": [30, 20, 10, 40]}"#;
        assert!(matches!(
            read_annotations(flipped.as_bytes(), "a.jsonl", &rig()),
            Err(IoError::Parse { line: 1, .. })
        ));
        let dup = format!("{flipped_ok}\n{flipped_ok}\n", flipped_ok = r#"{"frame": 0, "object_id": 1, "camera_id": 0, "bbox": [1, 2, 3, 4]}"#);
        assert!(matches!(read_annotations(dup.as_bytes(), "a.jsonl", &rig()), Err(IoError::Validation { .. })));
    }

    #[test]
    fn truncated_track_file() {
        let mut set = TrackSet::new();
        set.insert(1, 0, TrackSample::at(Vector3::new(0.1, 0.2, 0.3)));
        set.insert(1, 1, TrackSample::at(Vector3::new(0.1, 0.2, 0.3)));
        let mut buf = Vec::new();
        write_tracks(&set, &mut buf).unwrap();
        let cut = &buf[..buf.len() - 10];
        assert!(matches!(read_tracks(cut, "t.jsonl", Units::Meters), Err(IoError::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_track_set_roundtrips() {
        let mut buf = Vec::new();
        write_tracks(&TrackSet::new(), &mut buf).unwrap();
        assert!(buf.is_empty());
        assert!(read_tracks(&buf[..], "t", Units::Meters).unwrap().is_empty());
    }

    #[test]
    fn non_finite_tracks_are_refused() {
        let mut set = TrackSet::new();
        set.insert(1, 0, TrackSample::at(Vector3::new(f64::NAN, 0.0, 0.0)));
        assert!(write_tracks(&set, Vec::new()).is_err());
    }

    #[test]
    fn millimeter_tracks_are_converted() {
        let line = r#"{"frame": 3, "object_id": 2, "position": [1000, -500, 900], "keypoints": [[1, 2, 3]]}"#;
        let set = read_tracks(line.as_bytes(), "t", Units::Millimeters).unwrap();
        let s = set.get(2, 3).unwrap();
        assert_eq!(s.position, Vector3::new(1.0, -0.5, 0.9));
        assert_eq!(s.keypoints[0], Vector3::new(0.001, 0.002, 0.003));
    }

    #[test]
    fn skeleton_and_config_files() {
        let text = r#"{"name": "stick", "joints": ["head", "feet"], "canonical": [[0, 0, 1.8], [0, 0, 0]]}"#;
        let pose = parse_skeleton(text, "s.json").unwrap();
        assert_eq!(pose.len(), 2);
        assert!(parse_skeleton(r#"{"name": "coco17", "joints": ["a"], "canonical": [[0,0,1]]}"#, "s").is_err());
        assert!(parse_config(r#"{"dt": -1}"#, "c").is_err());
        assert_eq!(parse_config(r#"{"dt": 2}"#, "c").unwrap().dt, 2.0);
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let cams = rig();
            let _ = read_annotations(&bytes[..], "a", &cams);
            let _ = read_tracks(&bytes[..], "t", Units::Meters);
            if let Ok(text) = std::str::from_utf8(&bytes) {
                let _ = parse_calibration(text, "c", Units::Meters);
                let _ = parse_skeleton(text, "s");
                let _ = parse_config(text, "c");
            }
        }

        #[test]
        fn tracks_roundtrip_exactly(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let mut set = TrackSet::new();
            for (i, v) in values.iter().enumerate() {
                set.insert((i % 3) as u64, i as u64, TrackSample {
                    position: Vector3::new(*v, v / 3.0, v * 1e-7),
                    half_axes: Some(Vector3::new(v.abs() + 0.1, 0.3, std::f64::consts::PI)),
                    keypoints: vec![Vector3::new(v.sqrt().max(0.0), -v, 1.0 / 7.0)],
                });
            }
            let mut a = Vec::new();
            write_tracks(&set, &mut a).unwrap();
            let back = read_tracks(&a[..], "t", Units::Meters).unwrap();
            prop_assert_eq!(&back, &set);
            let mut b = Vec::new();
            write_tracks(&back, &mut b).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
