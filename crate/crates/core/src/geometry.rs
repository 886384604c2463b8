//! Pinhole cameras, ground-plane homographies and exact ellipsoid-to-box
//! projection through the dual quadric.
//!
//! Conventions: world frame with the ground at `z = 0`, camera frame with
//! `X_cam = R * X_world + t`, image `v` growing downward. No lens distortion.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MIN_DEPTH: f64 = 1e-9;
const ORTHONORMAL_TOL: f64 = 1e-9;
const MIN_HOMOGRAPHY_DET: f64 = 1e-12;
const MIN_HOMOGENEOUS_SCALE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {depth:e} in camera frame")]
    NonPositiveDepth { depth: f64 },
    #[error("ground homography is degenerate (|det H| = {det:e})")]
    DegenerateHomography { det: f64 },
    #[error("back-projected pixel maps to a point at infinity on the ground plane")]
    PointAtInfinity,
    #[error("projected ellipsoid outline is not a bounded ellipse: {reason}")]
    DegenerateConic { reason: &'static str },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid ellipsoid: {0}")]
    InvalidEllipsoid(String),
}

/// A calibrated pinhole camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    image_size: (u32, u32),
    projection: Matrix3x4<f64>,
}

impl CameraModel {
    /// Builds a camera after checking that `rotation` is a proper rotation and
    /// `intrinsics` is an upper-triangular calibration matrix.
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_size: (u32, u32),
    ) -> Result<Self, GeometryError> {
        let ortho = orthonormality_error(&rotation);
        if !(ortho < ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation is not orthonormal: max|R^T R - I| = {ortho:e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation determinant is {det}, expected 1"
            )));
        }
        let k = &intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(GeometryError::InvalidCamera(
                "focal lengths must be positive".into(),
            ));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(GeometryError::InvalidCamera(
                "intrinsics must be upper-triangular with bottom row (0, 0, 1)".into(),
            ));
        }
        if !translation.iter().chain(k.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite parameter".into()));
        }
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        rt.set_column(3, &translation);
        Ok(Self {
            projection: intrinsics * rt,
            intrinsics,
            rotation,
            translation,
            image_size,
        })
    }

    /// Camera with `fx`, `fy`, principal point `(cx, cy)` and no skew.
    pub fn from_focal(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_size: (u32, u32),
    ) -> Result<Self, GeometryError> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::new(k, rotation, translation, image_size)
    }

    /// Camera at world position `eye` looking at `target`, with world `+z` as up.
    pub fn look_at(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        image_size: (u32, u32),
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("eye coincides with target".into()))?;
        let up = Vector3::z();
        // Image x to the right, image y downward.
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("viewing direction is vertical".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::from_focal(fx, fy, cx, cy, rotation, translation, image_size)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    /// `P = K [R | t]`.
    pub fn projection_matrix(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera_frame(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Returns a copy with the translation multiplied by `factor` (unit conversion).
    pub fn with_scaled_translation(&self, factor: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.intrinsics,
            self.rotation,
            self.translation * factor,
            self.image_size,
        )
    }
}

/// Largest absolute entry of `R^T R - I`.
pub fn orthonormality_error(rotation: &Matrix3<f64>) -> f64 {
    (rotation.transpose() * rotation - Matrix3::identity()).amax()
}

/// Axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl BBox {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Option<Self> {
        let b = Self { u_min, v_min, u_max, v_max };
        b.is_valid().then_some(b)
    }

    pub fn from_array(a: [f64; 4]) -> Option<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.u_min, self.v_min, self.u_max, self.v_max]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.u_min <= self.u_max
            && self.v_min <= self.v_max
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.u_min && p.x <= self.u_max && p.y >= self.v_min && p.y <= self.v_max
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.u_min >= self.u_min
            && other.u_max <= self.u_max
            && other.v_min >= self.v_min
            && other.v_max <= self.v_max
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clamped(&self, width: f64, height: f64) -> BBox {
        let cu = |u: f64| u.clamp(0.0, width);
        let cv = |v: f64| v.clamp(0.0, height);
        BBox {
            u_min: cu(self.u_min),
            v_min: cv(self.v_min),
            u_max: cu(self.u_max),
            v_max: cv(self.v_max),
        }
    }

    /// Measurement vector `(u_min, v_min, u_max, v_max)`.
    pub fn as_measurement(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_row_slice(&self.to_array())
    }
}

/// World-axis-aligned ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: Vector3<f64>,
    pub half_axes: Vector3<f64>,
}

impl Ellipsoid {
    pub fn new(center: Vector3<f64>, half_axes: Vector3<f64>) -> Result<Self, GeometryError> {
        if !half_axes.iter().all(|a| *a > 0.0 && a.is_finite()) {
            return Err(GeometryError::InvalidEllipsoid(format!(
                "half-axes must be positive and finite, got {:?}",
                half_axes.as_slice()
            )));
        }
        if !center.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidEllipsoid("non-finite center".into()));
        }
        Ok(Self { center, half_axes })
    }

    /// Builds an ellipsoid from a center and log half-axes.
    pub fn from_log_axes(center: Vector3<f64>, log_axes: Vector3<f64>) -> Result<Self, GeometryError> {
        Self::new(center, log_axes.map(f64::exp))
    }

    /// Dual quadric `Q* = T diag(a², b², c², -1) T^T`, `T` the translation to the center.
    pub fn dual_quadric(&self) -> Matrix4<f64> {
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.center);
        let a = self.half_axes;
        let d = Matrix4::from_diagonal(&Vector4::new(a.x * a.x, a.y * a.y, a.z * a.z, -1.0));
        t * d * t.transpose()
    }

    /// Point on the surface at spherical angles (`theta` polar, `phi` azimuth).
    pub fn surface_point(&self, theta: f64, phi: f64) -> Vector3<f64> {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        self.center
            + Vector3::new(
                self.half_axes.x * st * cp,
                self.half_axes.y * st * sp,
                self.half_axes.z * ct,
            )
    }
}

/// Pinhole projection of a world point.
pub fn project_point(cam: &CameraModel, world: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    let pc = cam.to_camera_frame(world);
    if !(pc.z > MIN_DEPTH) {
        return Err(GeometryError::NonPositiveDepth { depth: pc.z });
    }
    let k = cam.intrinsics();
    let (x, y) = (pc.x / pc.z, pc.y / pc.z);
    Ok(Vector2::new(
        k[(0, 0)] * x + k[(0, 1)] * y + k[(0, 2)],
        k[(1, 1)] * y + k[(1, 2)],
    ))
}

/// Homography `H = K [r1 r2 t]` from the ground plane `z = 0` to the image.
pub fn ground_homography(cam: &CameraModel) -> Result<Matrix3<f64>, GeometryError> {
    let r = cam.rotation();
    let m = Matrix3::from_columns(&[r.column(0).into_owned(), r.column(1).into_owned(), *cam.translation()]);
    let h = cam.intrinsics() * m;
    let det = h.determinant();
    if !(det.abs() >= MIN_HOMOGRAPHY_DET) {
        return Err(GeometryError::DegenerateHomography { det });
    }
    Ok(h)
}

/// Intersects the viewing ray of pixel `px` with the ground plane.
pub fn backproject_ground(cam: &CameraModel, px: &Vector2<f64>) -> Result<Vector3<f64>, GeometryError> {
    let h = ground_homography(cam)?;
    let h_inv = h
        .try_inverse()
        .ok_or(GeometryError::DegenerateHomography { det: h.determinant() })?;
    let g = h_inv * Vector3::new(px.x, px.y, 1.0);
    // Normalize the homogeneous vector before the scale test so the
    // threshold does not depend on the magnitude of H.
    let g = g / g.norm();
    if !(g.z.abs() > MIN_HOMOGENEOUS_SCALE) {
        return Err(GeometryError::PointAtInfinity);
    }
    let ground = Vector3::new(g.x / g.z, g.y / g.z, 0.0);
    // Pixels above the horizon meet the plane behind the camera.
    let depth = cam.to_camera_frame(&ground).z;
    if !(depth > MIN_DEPTH) {
        return Err(GeometryError::NonPositiveDepth { depth });
    }
    Ok(ground)
}

/// Exact image-space bounding box of an ellipsoid's outline.
///
/// The outline is the conic dual to `C* = P Q* P^T`. A vertical line
/// `u = const`, i.e. `l = (1, 0, -u)`, is tangent to it when `l^T C* l = 0`,
/// which gives the two box edges in `u`; likewise for `v`.
pub fn project_ellipsoid_to_bbox(cam: &CameraModel, e: &Ellipsoid) -> Result<BBox, GeometryError> {
    // C* = P Q* P^T splits into G - p p^T with G = (KR) diag(a²) (KR)^T and
    // p the homogeneous image of the center. Expanding the discriminant in
    // those terms avoids cancelling the O(p⁴) parts for small ellipsoids.
    let kr = cam.intrinsics() * cam.rotation();
    let a2 = e.half_axes.component_mul(&e.half_axes);
    let g = kr * Matrix3::from_diagonal(&a2) * kr.transpose();
    let p = cam.intrinsics() * (cam.rotation() * e.center + cam.translation());
    let c22 = g[(2, 2)] - p.z * p.z;
    // c22 = sum_i a_i^2 r3_i^2 - depth(center)^2; with a positive center depth
    // it is negative exactly when the whole ellipsoid is in front of the camera.
    if !(p.z > MIN_DEPTH && c22 < -MIN_DEPTH * MIN_DEPTH) {
        return Err(GeometryError::DegenerateConic {
            reason: "ellipsoid is not strictly in front of the camera",
        });
    }
    let edges = |i: usize| -> Result<(f64, f64), GeometryError> {
        let ci2 = g[(i, 2)] - p[i] * p.z;
        let mid = ci2 / c22;
        let num = g[(i, 2)] * g[(i, 2)] - 2.0 * g[(i, 2)] * p[i] * p.z - g[(i, i)] * g[(2, 2)]
            + g[(i, i)] * p.z * p.z
            + g[(2, 2)] * p[i] * p[i];
        let disc = num / (c22 * c22);
        if !(disc >= 0.0) {
            return Err(GeometryError::DegenerateConic {
                reason: "negative discriminant",
            });
        }
        let half = disc.sqrt();
        Ok((mid - half, mid + half))
    };
    let (u_min, u_max) = edges(0)?;
    let (v_min, v_max) = edges(1)?;
    Ok(BBox { u_min, v_min, u_max, v_max })
}

/// Midpoint of the bottom edge of a box.
pub fn feet_point(b: &BBox) -> Vector2<f64> {
    Vector2::new((b.u_min + b.u_max) / 2.0, b.v_max)
}
