//! Tunable parameters for tracking and evaluation.

use serde::{Deserialize, Serialize};

use crate::filter::UtParams;

/// Every knob of a run. Missing fields in a config file take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seconds between consecutive frame indices.
    pub dt: f64,
    pub ut: UtParams,
    /// White-acceleration spectral density for positions and keypoints.
    pub q_pos: f64,
    /// Per-step variance of the log half-axes random walk.
    pub q_shape: f64,
    /// Variance of each box corner coordinate, px².
    pub r_bbox: f64,
    /// Variance of each keypoint pixel coordinate, px².
    pub r_keypoint: f64,
    /// Prior half-axes (m) of a newborn object.
    pub default_half_axes: [f64; 3],
    pub init_pos_var: f64,
    pub init_vel_var: f64,
    pub init_shape_var: f64,
    pub init_keypoint_pos_var: f64,
    pub init_keypoint_vel_var: f64,
    /// A 2D keypoint is used only if its visibility flag exceeds this.
    pub visibility_threshold: f64,
    /// Built-in skeleton name (`coco17`, `panoptic15`); enables keypoint tracking.
    pub skeleton: Option<String>,
    /// Clip annotated boxes to the image before use.
    pub clamp_boxes: bool,
    /// Match gate for CLEAR MOT and IDF1, meters.
    pub eval_threshold: f64,
    pub ospa_cutoff: f64,
    pub ospa_order: f64,
    /// OSPA⁽²⁾ window in frames; `None` uses the whole sequence.
    pub ospa_window: Option<usize>,
    /// Drop `z` before any evaluation matching.
    pub plane_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            ut: UtParams::default(),
            q_pos: 1e-6,
            q_shape: 1e-6,
            r_bbox: 1e-4,
            r_keypoint: 1.0,
            default_half_axes: [0.3, 0.3, 0.9],
            init_pos_var: 0.25,
            init_vel_var: 1.0,
            init_shape_var: 0.05,
            init_keypoint_pos_var: 0.05,
            init_keypoint_vel_var: 1.0,
            visibility_threshold: 0.0,
            skeleton: None,
            clamp_boxes: false,
            eval_threshold: 1.0,
            ospa_cutoff: 1.0,
            ospa_order: 1.0,
            ospa_window: None,
            plane_only: false,
        }
    }
}

impl RunConfig {
    /// Returns the first violated rule, if any.
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("dt", self.dt),
            ("eval_threshold", self.eval_threshold),
            ("ospa_cutoff", self.ospa_cutoff),
            ("ut.alpha", self.ut.alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("q_pos", self.q_pos),
            ("q_shape", self.q_shape),
            ("r_bbox", self.r_bbox),
            ("r_keypoint", self.r_keypoint),
            ("init_pos_var", self.init_pos_var),
            ("init_vel_var", self.init_vel_var),
            ("init_shape_var", self.init_shape_var),
            ("init_keypoint_pos_var", self.init_keypoint_pos_var),
            ("init_keypoint_vel_var", self.init_keypoint_vel_var),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !self.default_half_axes.iter().all(|a| *a > 0.0 && a.is_finite()) {
            return Err("default_half_axes must be positive".into());
        }
        if !(self.ospa_order >= 1.0 && self.ospa_order.is_finite()) {
            return Err(format!("ospa_order must be >= 1, got {}", self.ospa_order));
        }
        if self.ospa_window == Some(0) {
            return Err("ospa_window must be at least one frame".into());
        }
        Ok(())
    }
}
