//! Multi-camera fusion of 2D annotations into 3D ground truth.
//!
//! Boxes and keypoints annotated in several calibrated views are fused per
//! object with an unscented Kalman filter into 3D tracks: ellipsoid center,
//! velocity, half-axes and optional 3D keypoints. The crate also ships the
//! evaluation metrics (CLEAR MOT, IDF1, OSPA⁽²⁾, MPJPE, AP) and a seeded
//! synthetic scene generator used to validate the pipeline end to end.

pub mod assignment;
pub mod cli;
pub mod config;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pose;
pub mod synth;
pub mod tracker;

pub use config::RunConfig;
pub use filter::{GaussianBelief, UtParams};
pub use geometry::{BBox, CameraModel, Ellipsoid};
pub use metrics::{MetricReport, TrackSet};
pub use tracker::{run_all, track_object, Annotations, CameraRig, Track};
