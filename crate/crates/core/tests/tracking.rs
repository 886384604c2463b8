mod common;

use std::collections::BTreeMap;

use mvfuse::geometry::{project_point, BBox, CameraModel};
use mvfuse::metrics::TrackSet;
use mvfuse::tracker::{init_target, run_all, track_object, Annotations, CameraRig, Track};
use mvfuse::RunConfig;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use common::{render, ring, rng, Scripted};

fn config() -> RunConfig {
    RunConfig::default()
}

fn track_of(ann: &Annotations, cams: &CameraRig, id: u64) -> Track {
    track_object(id, &ann.object_sequence(id), cams, &config(), None).unwrap().track
}

fn tilted(eye: Vector3<f64>) -> CameraModel {
    CameraModel::look_at(1000.0, 1000.0, 960.0, 540.0, eye, Vector3::new(3.0, 4.0, 0.0), (1920, 1080)).unwrap()
}

#[test]
fn two_camera_init_recovers_ground_position() {
    // Boxes whose bottom-edge midpoint is the image of the ground point (3, 4, 0).
    let cams: CameraRig = [(0, tilted(Vector3::new(-5.0, 0.0, 8.0))), (1, tilted(Vector3::new(10.0, 12.0, 6.0)))].into();
    let ground = Vector3::new(3.0, 4.0, 0.0);
    let boxes: BTreeMap<u32, BBox> = cams
        .iter()
        .map(|(id, cam)| {
            let px = project_point(cam, &ground).unwrap();
            (*id, BBox::new(px.x - 30.0, px.y - 120.0, px.x + 30.0, px.y).unwrap())
        })
        .collect();
    let s = init_target(&boxes, &cams, &config()).unwrap();
    assert!((s.position().x - 3.0).abs() < 1e-6);
    assert!((s.position().y - 4.0).abs() < 1e-6);
    assert_eq!(s.position().z, 0.9);
    assert_eq!(s.velocity(), Vector3::zeros());
}

#[test]
fn static_object_converges_to_truth() {
    let cams = ring(4, 10.0, 4.0);
    let obj = Scripted::linear(0, Vector3::new(1.0, -2.0, 0.85), Vector3::zeros(), 0.1, 0..100);
    let truth_axes = obj.half_axes;
    let (ann, _) = render(&cams, &[obj], None);
    let track = track_of(&ann, &cams, 0);
    let last = track.points.last().unwrap();
    assert_eq!(last.frame, 99);
    assert!((last.position - Vector3::new(1.0, -2.0, 0.85)).norm() < 0.05);
    assert!((last.half_axes - truth_axes).norm() < 0.10);
}

#[test]
fn gap_frames_follow_constant_velocity_prediction() {
    let cams = ring(4, 10.0, 4.0);
    let obj = Scripted::linear(0, Vector3::new(-2.0, 0.0, 0.9), Vector3::new(0.5, 0.2, 0.0), 0.1, 0..40);
    let (mut ann, _) = render(&cams, &[obj], None);
    ann.retain(|frame, _, _| !(10..=20).contains(&frame));
    let track = track_of(&ann, &cams, 0);
    assert_eq!(track.points.len(), 40);
    let at = |k: usize| &track.points[k];
    let step = at(10).position - at(9).position;
    for k in 10..=20 {
        let want = at(9).position + step * (k - 9) as f64;
        assert!((at(k).position - want).norm() < 1e-12, "frame {k}");
        // Shape is a random walk: its mean does not move without measurements.
        assert_eq!(at(k).half_axes, at(9).half_axes);
    }
    assert!((step / 0.1 - Vector3::new(0.5, 0.2, 0.0)).norm() < 0.05);
}

#[test]
fn velocity_converges_for_moving_object() {
    let cams = ring(4, 10.0, 4.0);
    let obj = Scripted::linear(0, Vector3::new(-3.0, 1.0, 0.9), Vector3::new(0.5, 0.0, 0.0), 0.1, 0..51);
    let (ann, _) = render(&cams, &[obj], None);
    let res = track_object(0, &ann.object_sequence(0), &cams, &config(), None).unwrap();
    assert_eq!(res.track.points.last().unwrap().frame, 50);
    let v = res.final_state.velocity();
    assert!((v - Vector3::new(0.5, 0.0, 0.0)).norm() < 0.05, "{v:?}");
}

fn mean_error(pred: &[Track], truth: &TrackSet) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for t in pred {
        for p in &t.points {
            sum += (p.position - truth.get(t.object_id, p.frame).unwrap().position).norm();
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn more_cameras_do_not_hurt() {
    let mut r = rng(31);
    let (mut four_total, mut two_total) = (0.0, 0.0);
    for _ in 0..20 {
        let cams = ring(4, 12.0, 5.0);
        let two: CameraRig = cams.iter().filter(|(id, _)| **id % 2 == 0).map(|(k, v)| (*k, v.clone())).collect();
        let start = Vector3::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), 0.9);
        let vel = Vector3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), 0.0);
        let obj = Scripted::linear(0, start, vel, 0.1, 0..30);
        let (ann4, truth) = render(&cams, &[obj], None);
        let mut ann2 = ann4.clone();
        ann2.retain(|_, _, c| c % 2 == 0);
        let e4 = mean_error(&[track_of(&ann4, &cams, 0)], &truth);
        let e2 = mean_error(&[track_of(&ann2, &two, 0)], &truth);
        four_total += e4;
        two_total += e2;
    }
    assert!(four_total <= two_total, "4 cameras {four_total} vs 2 cameras {two_total}");
}

fn three_objects() -> (CameraRig, Annotations) {
    let cams = ring(5, 12.0, 5.0);
    let objects = [
        Scripted::linear(4, Vector3::new(-3.0, 0.0, 0.9), Vector3::new(0.4, 0.1, 0.0), 0.1, 0..30),
        Scripted::linear(7, Vector3::new(2.0, 2.0, 0.9), Vector3::new(-0.2, -0.3, 0.0), 0.1, 5..25),
        Scripted::linear(9, Vector3::new(0.0, -3.0, 0.9), Vector3::zeros(), 0.1, 12..40),
    ];
    let (ann, _) = render(&cams, &objects, None);
    (cams, ann)
}

#[test]
fn identical_inputs_give_identical_tracks() {
    let (cams, ann) = three_objects();
    let a = run_all(&ann, &cams, &config(), None);
    let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run_all(&ann, &cams, &config(), None));
    assert_eq!(a, b);
}

#[test]
fn objects_are_tracked_independently() {
    let (cams, ann) = three_objects();
    let all = run_all(&ann, &cams, &config(), None);
    let mut only = ann.clone();
    only.retain(|_, obj, _| obj == 7);
    let alone = run_all(&only, &cams, &config(), None);
    assert_eq!(alone.tracks.len(), 1);
    assert_eq!(&alone.tracks[0], all.tracks.iter().find(|t| t.object_id == 7).unwrap());
}

#[test]
fn lifetimes_match_annotations() {
    let (cams, ann) = three_objects();
    let out = run_all(&ann, &cams, &config(), None);
    let spans: Vec<(u64, u64, u64)> =
        out.tracks.iter().map(|t| (t.object_id, t.points[0].frame, t.points.last().unwrap().frame)).collect();
    assert_eq!(spans, vec![(4, 0, 29), (7, 5, 24), (9, 12, 39)]);
    for t in &out.tracks {
        assert!(t.points.windows(2).all(|w| w[1].frame == w[0].frame + 1));
    }
}

#[test]
fn relabeling_objects_relabels_tracks() {
    let (cams, ann) = three_objects();
    let relabel = |id: u64| 100 - id;
    let mut swapped = Annotations::new();
    for f in ann.frames() {
        for (obj, views) in &f.objects {
            for (cam, o) in views {
                swapped.insert(f.frame, relabel(*obj), *cam, o.clone());
            }
        }
    }
    let a = run_all(&ann, &cams, &config(), None);
    let b = run_all(&swapped, &cams, &config(), None);
    assert_eq!(a.tracks.len(), b.tracks.len());
    for t in &a.tracks {
        let other = b.tracks.iter().find(|u| u.object_id == relabel(t.object_id)).unwrap();
        assert_eq!(other.points, t.points);
    }
}

#[test]
fn camera_order_barely_matters() {
    let (cams, ann) = three_objects();
    // Reverse the ascending-id visiting order by relabeling cameras.
    let flip = |c: u32| 10 - c;
    let flipped_cams: CameraRig = cams.iter().map(|(k, v)| (flip(*k), v.clone())).collect();
    let mut flipped = Annotations::new();
    for f in ann.frames() {
        for (obj, views) in &f.objects {
            for (cam, o) in views {
                flipped.insert(f.frame, *obj, flip(*cam), o.clone());
            }
        }
    }
    let a = run_all(&ann, &cams, &config(), None);
    let b = run_all(&flipped, &flipped_cams, &config(), None);
    for (ta, tb) in a.tracks.iter().zip(&b.tracks) {
        for (pa, pb) in ta.points.iter().zip(&tb.points).skip(5) {
            assert!((pa.position - pb.position).norm() < 1e-3);
        }
    }
}

#[test]
fn unknown_cameras_are_ignored_and_empty_input_gives_nothing() {
    let cams = ring(3, 10.0, 4.0);
    assert!(run_all(&Annotations::new(), &cams, &config(), None).tracks.is_empty());
    let (ann, _) = render(&ring(4, 10.0, 4.0), &[Scripted::linear(1, Vector3::new(0.0, 0.0, 0.9), Vector3::zeros(), 0.1, 0..5)], None);
    let mut only_unknown = ann.clone();
    only_unknown.retain(|_, _, c| c == 3);
    let out = run_all(&only_unknown, &cams, &config(), None);
    assert!(out.tracks.is_empty());
    assert_eq!(out.failures.len(), 1);
}

#[test]
fn camera_behind_object_is_skipped_with_diagnostic() {
    let mut cams = ring(3, 10.0, 4.0);
    // A camera facing away from the arena: every sigma ellipsoid lies behind it.
    let away = CameraModel::new(
        Matrix3::new(1000.0, 0.0, 960.0, 0.0, 1000.0, 540.0, 0.0, 0.0, 1.0),
        Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
        Vector3::new(0.0, 0.0, -20.0),
        (1920, 1080),
    )
    .unwrap();
    let obj = Scripted::linear(0, Vector3::new(0.5, 0.5, 0.9), Vector3::zeros(), 0.1, 0..10);
    let (mut ann, _) = render(&cams, &[obj], None);
    cams.insert(9, away);
    let borrowed = ann.object_sequence(0)[&0][&0].clone();
    for k in 0..10 {
        ann.insert(k, 0, 9, borrowed.clone());
    }
    let out = run_all(&ann, &cams, &config(), None);
    assert_eq!(out.tracks.len(), 1);
    assert_eq!(out.tracks[0].points.len(), 10);
    assert!(out.diagnostics.iter().any(|d| d.camera_id == Some(9)));
    assert!((out.tracks[0].points[9].position - Vector3::new(0.5, 0.5, 0.9)).norm() < 0.05);
}
