//! Tracking and pose evaluation: CLEAR MOT, IDF1, OSPA⁽²⁾, MPJPE, AP@d and
//! Recall@d.
//!
//! All distances are Euclidean in world meters; pose thresholds are in
//! millimeters.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::assignment::{gated_assignment, min_cost_assignment};
use crate::tracker::{FrameIndex, ObjectId, Track};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("ground truth is empty; the metric is undefined")]
    EmptyGroundTruth,
    #[error("skeleton mismatch at frame {frame}: {pred} predicted joints vs {gt} ground-truth joints")]
    SkeletonMismatch { frame: FrameIndex, pred: usize, gt: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// One object's state at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSample {
    pub position: Vector3<f64>,
    pub half_axes: Option<Vector3<f64>>,
    pub keypoints: Vec<Vector3<f64>>,
}

impl TrackSample {
    pub fn at(position: Vector3<f64>) -> Self {
        Self { position, half_axes: None, keypoints: Vec::new() }
    }
}

/// Time-indexed samples per object id. Keyed maps rule out duplicate
/// (id, frame) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    pub tracks: BTreeMap<ObjectId, BTreeMap<FrameIndex, TrackSample>>,
}

impl TrackSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a sample, returning the one it replaced.
    pub fn insert(&mut self, id: ObjectId, frame: FrameIndex, sample: TrackSample) -> Option<TrackSample> {
        self.tracks.entry(id).or_default().insert(frame, sample)
    }

    pub fn get(&self, id: ObjectId, frame: FrameIndex) -> Option<&TrackSample> {
        self.tracks.get(&id)?.get(&frame)
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.values().all(BTreeMap::is_empty)
    }

    /// Number of (id, frame) samples.
    pub fn len(&self) -> usize {
        self.tracks.values().map(BTreeMap::len).sum()
    }

    pub fn frames(&self) -> BTreeSet<FrameIndex> {
        self.tracks.values().flat_map(|t| t.keys().copied()).collect()
    }

    /// Samples present at `frame`, ordered by id.
    pub fn at_frame(&self, frame: FrameIndex) -> Vec<(ObjectId, &TrackSample)> {
        self.tracks
            .iter()
            .filter_map(|(id, t)| t.get(&frame).map(|s| (*id, s)))
            .collect()
    }

    /// Copy with every position's `z` set to zero.
    pub fn flattened(&self) -> TrackSet {
        self.map_samples(|s| TrackSample { position: Vector3::new(s.position.x, s.position.y, 0.0), ..s.clone() })
    }

    /// Applies `f` to every sample.
    pub fn map_samples(&self, f: impl Fn(&TrackSample) -> TrackSample) -> TrackSet {
        TrackSet {
            tracks: self
                .tracks
                .iter()
                .map(|(id, t)| (*id, t.iter().map(|(k, s)| (*k, f(s))).collect()))
                .collect(),
        }
    }

    pub fn from_tracks(tracks: &[Track]) -> TrackSet {
        let mut set = TrackSet::new();
        for t in tracks {
            for p in &t.points {
                set.insert(
                    t.object_id,
                    p.frame,
                    TrackSample { position: p.position, half_axes: Some(p.half_axes), keypoints: p.keypoints.clone() },
                );
            }
        }
        set
    }
}

/// CLEAR MOT counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClearMot {
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
    pub matches: usize,
    pub gt_count: usize,
    /// Percent.
    pub mota: f64,
}

fn check_positive(name: &str, v: f64) -> Result<(), MetricError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(MetricError::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}

/// CLEAR MOT with match persistence and Hungarian matching of the rest.
///
/// A ground-truth object keeps last frame's partner if both are present and
/// within `threshold`. Remaining objects are matched by minimum total
/// distance among pairs within the gate. A match whose partner differs from
/// the ground truth's previous partner is an identity switch.
pub fn clear_mot(pred: &TrackSet, gt: &TrackSet, threshold: f64) -> Result<ClearMot, MetricError> {
    check_positive("threshold", threshold)?;
    let gt_count = gt.len();
    if gt_count == 0 {
        return Err(MetricError::EmptyGroundTruth);
    }
    let mut frames = gt.frames();
    frames.extend(pred.frames());
    let mut active: HashMap<ObjectId, ObjectId> = HashMap::new();
    let mut last_partner: HashMap<ObjectId, ObjectId> = HashMap::new();
    let (mut fp, mut fn_, mut ids, mut matches) = (0, 0, 0, 0);
    for frame in frames {
        let gts = gt.at_frame(frame);
        let preds = pred.at_frame(frame);
        let pred_pos: HashMap<ObjectId, Vector3<f64>> = preds.iter().map(|(id, s)| (*id, s.position)).collect();
        let mut matched: Vec<(ObjectId, ObjectId)> = Vec::new();
        let mut used_pred: BTreeSet<ObjectId> = BTreeSet::new();
        let mut open_gt = Vec::new();
        for (g, s) in &gts {
            let kept = active.get(g).and_then(|p| {
                let pp = pred_pos.get(p)?;
                ((pp - s.position).norm() <= threshold && !used_pred.contains(p)).then_some(*p)
            });
            match kept {
                Some(p) => {
                    used_pred.insert(p);
                    matched.push((*g, p));
                }
                None => open_gt.push((*g, s.position)),
            }
        }
        let open_pred: Vec<(ObjectId, Vector3<f64>)> = preds
            .iter()
            .filter(|(id, _)| !used_pred.contains(id))
            .map(|(id, s)| (*id, s.position))
            .collect();
        let cost: Vec<f64> = open_gt
            .iter()
            .flat_map(|(_, g)| open_pred.iter().map(move |(_, p)| (p - g).norm()))
            .collect();
        for (r, c) in gated_assignment(&cost, open_gt.len(), open_pred.len(), threshold) {
            let (g, p) = (open_gt[r].0, open_pred[c].0);
            if last_partner.get(&g).is_some_and(|prev| *prev != p) {
                ids += 1;
            }
            matched.push((g, p));
        }
        active.clear();
        for (g, p) in &matched {
            active.insert(*g, *p);
            last_partner.insert(*g, *p);
        }
        matches += matched.len();
        fp += preds.len() - matched.len();
        fn_ += gts.len() - matched.len();
    }
    let mota = (1.0 - (fp + fn_ + ids) as f64 / gt_count as f64) * 100.0;
    Ok(ClearMot { fp, fn_, ids, matches, gt_count, mota })
}

/// Identity counts behind IDF1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdScores {
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
    /// Percent.
    pub idf1: f64,
}

/// IDF1 with a global one-to-one matching of trajectories that maximizes
/// the number of frames where the paired trajectories lie within `threshold`.
pub fn id_scores(pred: &TrackSet, gt: &TrackSet, threshold: f64) -> Result<IdScores, MetricError> {
    check_positive("threshold", threshold)?;
    let total_gt = gt.len();
    if total_gt == 0 {
        return Err(MetricError::EmptyGroundTruth);
    }
    let total_pred = pred.len();
    let gt_ids: Vec<&BTreeMap<FrameIndex, TrackSample>> = gt.tracks.values().collect();
    let pred_ids: Vec<&BTreeMap<FrameIndex, TrackSample>> = pred.tracks.values().collect();
    let overlap = |g: &BTreeMap<FrameIndex, TrackSample>, p: &BTreeMap<FrameIndex, TrackSample>| {
        g.iter()
            .filter(|(k, s)| p.get(k).is_some_and(|q| (q.position - s.position).norm() <= threshold))
            .count()
    };
    let counts: Vec<usize> = gt_ids.iter().flat_map(|g| pred_ids.iter().map(|p| overlap(g, p))).collect();
    let cost: Vec<f64> = counts.iter().map(|c| -(*c as f64)).collect();
    let idtp: usize = min_cost_assignment(&cost, gt_ids.len(), pred_ids.len())
        .into_iter()
        .map(|(r, c)| counts[r * pred_ids.len() + c])
        .sum();
    let idfn = total_gt - idtp;
    let idfp = total_pred - idtp;
    let idf1 = 2.0 * idtp as f64 / (total_gt + total_pred) as f64 * 100.0;
    Ok(IdScores { idtp, idfp, idfn, idf1 })
}

pub fn idf1(pred: &TrackSet, gt: &TrackSet, threshold: f64) -> Result<f64, MetricError> {
    id_scores(pred, gt, threshold).map(|s| s.idf1)
}

/// Time-averaged truncated distance between two trajectories over `frames`.
///
/// Per frame: `min(c, |x - y|)` when both exist, `c` when only one exists,
/// and the frame is ignored when neither does. The order-`p` mean runs over
/// frames where at least one trajectory exists.
pub fn track_distance(
    a: &BTreeMap<FrameIndex, TrackSample>,
    b: &BTreeMap<FrameIndex, TrackSample>,
    frames: &[FrameIndex],
    cutoff: f64,
    order: f64,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in frames {
        let d = match (a.get(k), b.get(k)) {
            (Some(x), Some(y)) => (x.position - y.position).norm().min(cutoff),
            (None, None) => continue,
            _ => cutoff,
        };
        sum += d.powf(order);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).powf(1.0 / order)
    }
}

/// OSPA⁽²⁾ over one window of frames.
pub fn ospa2_window(pred: &TrackSet, gt: &TrackSet, frames: &[FrameIndex], cutoff: f64, order: f64) -> f64 {
    let alive = |set: &TrackSet| -> Vec<BTreeMap<FrameIndex, TrackSample>> {
        set.tracks
            .values()
            .filter(|t| frames.iter().any(|k| t.contains_key(k)))
            .cloned()
            .collect()
    };
    let (mut x, mut y) = (alive(pred), alive(gt));
    if x.len() > y.len() {
        std::mem::swap(&mut x, &mut y);
    }
    let (m, n) = (x.len(), y.len());
    if n == 0 {
        return 0.0;
    }
    let cost: Vec<f64> = x
        .iter()
        .flat_map(|a| y.iter().map(|b| track_distance(a, b, frames, cutoff, order).powf(order)))
        .collect();
    let assigned: f64 = min_cost_assignment(&cost, m, n).into_iter().map(|(r, c)| cost[r * n + c]).sum();
    let total = assigned + cutoff.powf(order) * (n - m) as f64;
    (total / n as f64).powf(1.0 / order).min(cutoff)
}

/// OSPA⁽²⁾ between track sets. With `window = None` the whole sequence is one
/// window; otherwise the result is the mean of sliding-window values ending
/// at every frame of the sequence.
pub fn ospa2(pred: &TrackSet, gt: &TrackSet, cutoff: f64, order: f64, window: Option<usize>) -> Result<f64, MetricError> {
    check_positive("cutoff", cutoff)?;
    if !(order >= 1.0 && order.is_finite()) {
        return Err(MetricError::InvalidParameter(format!("order must be >= 1, got {order}")));
    }
    let mut all = gt.frames();
    all.extend(pred.frames());
    let (Some(&first), Some(&last)) = (all.first(), all.last()) else {
        return Ok(0.0);
    };
    let span: Vec<FrameIndex> = (first..=last).collect();
    match window {
        None => Ok(ospa2_window(pred, gt, &span, cutoff, order)),
        Some(0) => Err(MetricError::InvalidParameter("window must be at least 1".into())),
        Some(w) => {
            let values: Vec<f64> = (0..span.len())
                .map(|end| {
                    let start = (end + 1).saturating_sub(w);
                    ospa2_window(pred, gt, &span[start..=end], cutoff, order)
                })
                .collect();
            Ok(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// Pose evaluation results; distances in millimeters, rates in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseReport {
    pub ap: Vec<(f64, f64)>,
    pub recall_threshold_mm: f64,
    pub recall: f64,
    pub mpjpe_mm: f64,
    pub gt_poses: usize,
    pub pred_poses: usize,
}

fn mpjpe_mm(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64 * 1000.0
}

/// Pose metrics over all frames.
///
/// Per frame, poses are paired by minimum total MPJPE. Recall counts ground
/// truth poses paired within `recall_at_mm`; MPJPE averages over those pairs.
/// Without confidence scores every prediction shares one operating point,
/// so AP@d is the area under a single-step precision-recall curve:
/// `precision_d * recall_d`, where a pair is a true positive at `d` if its
/// MPJPE is at most `d`.
pub fn pose_metrics(
    pred: &TrackSet,
    gt: &TrackSet,
    ap_thresholds_mm: &[f64],
    recall_at_mm: f64,
) -> Result<PoseReport, MetricError> {
    check_positive("recall threshold", recall_at_mm)?;
    let mut frames = gt.frames();
    frames.extend(pred.frames());
    let mut gt_poses = 0usize;
    let mut pred_poses = 0usize;
    let mut errors: Vec<f64> = Vec::new();
    for frame in frames {
        let poses = |set: &TrackSet| -> Vec<Vec<Vector3<f64>>> {
            set.at_frame(frame)
                .into_iter()
                .filter(|(_, s)| !s.keypoints.is_empty())
                .map(|(_, s)| s.keypoints.clone())
                .collect()
        };
        let (p, g) = (poses(pred), poses(gt));
        gt_poses += g.len();
        pred_poses += p.len();
        for a in &p {
            for b in &g {
                if a.len() != b.len() {
                    return Err(MetricError::SkeletonMismatch { frame, pred: a.len(), gt: b.len() });
                }
            }
        }
        let cost: Vec<f64> = g.iter().flat_map(|b| p.iter().map(move |a| mpjpe_mm(a, b))).collect();
        for (r, c) in min_cost_assignment(&cost, g.len(), p.len()) {
            errors.push(cost[r * p.len() + c]);
        }
    }
    if gt_poses == 0 {
        return Err(MetricError::EmptyGroundTruth);
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let ap = ap_thresholds_mm
        .iter()
        .map(|d| {
            let tp = errors.iter().filter(|e| **e <= *d).count();
            (*d, ratio(tp, gt_poses) * ratio(tp, pred_poses) * 100.0)
        })
        .collect();
    let within: Vec<f64> = errors.iter().copied().filter(|e| *e <= recall_at_mm).collect();
    let mpjpe = if within.is_empty() { f64::NAN } else { within.iter().sum::<f64>() / within.len() as f64 };
    Ok(PoseReport {
        ap,
        recall_threshold_mm: recall_at_mm,
        recall: ratio(within.len(), gt_poses) * 100.0,
        mpjpe_mm: mpjpe,
        gt_poses,
        pred_poses,
    })
}

/// Evaluation parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalParams {
    pub threshold: f64,
    pub ospa_cutoff: f64,
    pub ospa_order: f64,
    pub ospa_window: Option<usize>,
    pub plane_only: bool,
    pub ap_thresholds_mm: Vec<f64>,
    pub recall_at_mm: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            ospa_cutoff: 1.0,
            ospa_order: 1.0,
            ospa_window: None,
            plane_only: false,
            ap_thresholds_mm: vec![25.0, 50.0, 100.0, 150.0],
            recall_at_mm: 500.0,
        }
    }
}

/// Full evaluation of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub sequence: String,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
    pub mota: f64,
    pub idf1: f64,
    pub ospa2: f64,
    pub params: EvalParams,
    pub pose: Option<PoseReport>,
}

/// Runs every tracking metric and, when both sides carry keypoints, the pose metrics.
pub fn evaluate(sequence: &str, pred: &TrackSet, gt: &TrackSet, params: &EvalParams) -> Result<MetricReport, MetricError> {
    let (p, g) = if params.plane_only { (pred.flattened(), gt.flattened()) } else { (pred.clone(), gt.clone()) };
    let mot = clear_mot(&p, &g, params.threshold)?;
    let ids = id_scores(&p, &g, params.threshold)?;
    let ospa = ospa2(&p, &g, params.ospa_cutoff, params.ospa_order, params.ospa_window)?;
    let has_kp = |s: &TrackSet| s.tracks.values().flat_map(|t| t.values()).any(|x| !x.keypoints.is_empty());
    let pose = if has_kp(pred) && has_kp(gt) {
        Some(pose_metrics(pred, gt, &params.ap_thresholds_mm, params.recall_at_mm)?)
    } else {
        None
    };
    Ok(MetricReport {
        sequence: sequence.to_string(),
        fp: mot.fp,
        fn_: mot.fn_,
        ids: mot.ids,
        mota: mot.mota,
        idf1: ids.idf1,
        ospa2: ospa,
        params: params.clone(),
        pose,
    })
}

impl MetricReport {
    /// Aligned text table: tracking columns, then pose columns when present.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>6} {:>6} {:>5} {:>7} {:>7} {:>8}\n",
            "Sequence", "FP", "FN", "IDs", "MOTA", "IDF1", "OSPA2"
        );
        out += &format!(
            "{:<16} {:>6} {:>6} {:>5} {:>7.1} {:>7.1} {:>8.3}\n",
            self.sequence, self.fp, self.fn_, self.ids, self.mota, self.idf1, self.ospa2
        );
        if let Some(p) = &self.pose {
            out += "\n";
            out += &format!("{:<16}", "Sequence");
            for (d, _) in &p.ap {
                out += &format!(" {:>7}", format!("AP{d}"));
            }
            out += &format!(" {:>10} {:>10}\n", format!("Rec@{}", p.recall_threshold_mm), "MPJPE[mm]");
            out += &format!("{:<16}", self.sequence);
            for (_, v) in &p.ap {
                out += &format!(" {v:>7.1}");
            }
            out += &format!(" {:>10.1} {:>10.1}\n", p.recall, p.mpjpe_mm);
        }
        out
    }
}
