//! Scaled unscented transform, linear Kalman prediction and the UKF
//! measurement update.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("covariance is not positive definite even after jitter")]
    CholeskyFailure,
    #[error("measurement function failed on sigma point {index}: {reason}")]
    SigmaPointProjectionFailure { index: usize, reason: String },
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("sampling period must be positive and finite, got {0}")]
    InvalidDt(f64),
    #[error("noise variance must be non-negative, got {0}")]
    InvalidVariance(f64),
}

/// Mean and covariance of a Gaussian state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, FilterError> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(FilterError::DimensionMismatch(format!(
                "mean has {d} entries, covariance is {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn from_diagonal(mean: DVector<f64>, variances: &DVector<f64>) -> Result<Self, FilterError> {
        Self::new(mean, DMatrix::from_diagonal(variances))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Scaling parameters of the unscented transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self { alpha: 1e-1, beta: 2.0, kappa: 0.0 }
    }
}

impl UtParams {
    pub fn lambda(&self, d: usize) -> f64 {
        self.alpha * self.alpha * (d as f64 + self.kappa) - d as f64
    }
}

/// The `2d + 1` sigma points of a belief, one per row.
#[derive(Debug, Clone)]
pub struct SigmaSet {
    pub points: DMatrix<f64>,
    pub mean_weights: DVector<f64>,
    pub cov_weights: DVector<f64>,
    pub params: UtParams,
    pub lambda: f64,
}

impl SigmaSet {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.row(i).transpose()
    }

    /// Weighted mean of the points.
    pub fn mean(&self) -> DVector<f64> {
        self.points.tr_mul(&self.mean_weights)
    }

    /// Covariance of the points about `center` with the covariance weights.
    pub fn covariance_about(&self, center: &DVector<f64>) -> DMatrix<f64> {
        let d = self.points.ncols();
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..self.len() {
            let dev = self.point(i) - center;
            cov.ger(self.cov_weights[i], &dev, &dev, 1.0);
        }
        cov
    }
}

/// Lower Cholesky factor, adding diagonal jitter when the plain factorization fails.
///
/// Jitter starts at `1e-12 * trace / d` and grows tenfold per retry up to
/// `1e-6 * trace / d`.
fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.l());
    }
    let d = m.nrows().max(1) as f64;
    let scale = (m.trace() / d).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-12 * scale;
    while jitter <= 1e-6 * scale * (1.0 + 1e-9) {
        let mut shifted = m.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = shifted.cholesky() {
            return Ok(ch.l());
        }
        jitter *= 10.0;
    }
    Err(FilterError::CholeskyFailure)
}

/// Sigma points of `belief` under the scaled unscented transform.
pub fn sigma_points(belief: &GaussianBelief, params: UtParams) -> Result<SigmaSet, FilterError> {
    let d = belief.dim();
    let lambda = params.lambda(d);
    let spread = d as f64 + lambda;
    if !(spread > 0.0) {
        return Err(FilterError::DimensionMismatch(format!(
            "d + lambda must be positive (d = {d}, lambda = {lambda})"
        )));
    }
    let root = cholesky_with_jitter(&(&belief.covariance * spread))?;
    let n = 2 * d + 1;
    let mut points = DMatrix::zeros(n, d);
    points.set_row(0, &belief.mean.transpose());
    for i in 0..d {
        let col = root.column(i);
        points.set_row(1 + i, &(&belief.mean + col).transpose());
        points.set_row(1 + d + i, &(&belief.mean - col).transpose());
    }
    let w = 1.0 / (2.0 * spread);
    let mut mean_weights = DVector::from_element(n, w);
    let mut cov_weights = DVector::from_element(n, w);
    mean_weights[0] = lambda / spread;
    cov_weights[0] = lambda / spread + (1.0 - params.alpha * params.alpha + params.beta);
    Ok(SigmaSet { points, mean_weights, cov_weights, params, lambda })
}

/// Symmetrizes `p` and lifts any negative eigenvalues to zero.
pub fn symmetrize_and_clamp(p: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (p + p.transpose()) * 0.5;
    if sym.clone().cholesky().is_some() {
        return sym;
    }
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|v| *v >= 0.0) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    (&out + out.transpose()) * 0.5
}

/// Which state the motion model drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateLayout {
    /// `[x, vx, y, vy, z, vz, log a, log b, log c]`.
    Ellipsoid,
    /// `[x, vx, y, vy, z, vz]`.
    Keypoint,
}

impl StateLayout {
    pub fn dim(self) -> usize {
        match self {
            StateLayout::Ellipsoid => 9,
            StateLayout::Keypoint => 6,
        }
    }
}

/// Index of position coordinate `axis` in the interleaved kinematic layout.
pub const fn pos_index(axis: usize) -> usize {
    2 * axis
}

/// Index of velocity coordinate `axis` in the interleaved kinematic layout.
pub const fn vel_index(axis: usize) -> usize {
    2 * axis + 1
}

/// Index of log half-axis `axis` in the ellipsoid layout.
pub const fn shape_index(axis: usize) -> usize {
    6 + axis
}

/// Linear transition `x' = F x + w`, `w ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    pub transition: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    pub dt: f64,
}

/// Constant-velocity kinematics for three axes, with a random-walk shape
/// block for the ellipsoid layout. Kinematic noise uses the continuous
/// white-acceleration block `q [[dt³/3, dt²/2], [dt²/2, dt]]`.
pub fn make_motion_model(
    dt: f64,
    q_pos: f64,
    q_shape: f64,
    layout: StateLayout,
) -> Result<MotionModel, FilterError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(FilterError::InvalidDt(dt));
    }
    for q in [q_pos, q_shape] {
        if !(q >= 0.0 && q.is_finite()) {
            return Err(FilterError::InvalidVariance(q));
        }
    }
    let d = layout.dim();
    let mut f = DMatrix::identity(d, d);
    let mut q = DMatrix::zeros(d, d);
    for axis in 0..3 {
        let (p, v) = (pos_index(axis), vel_index(axis));
        f[(p, v)] = dt;
        q[(p, p)] = q_pos * dt.powi(3) / 3.0;
        q[(p, v)] = q_pos * dt.powi(2) / 2.0;
        q[(v, p)] = q_pos * dt.powi(2) / 2.0;
        q[(v, v)] = q_pos * dt;
    }
    if layout == StateLayout::Ellipsoid {
        for axis in 0..3 {
            let s = shape_index(axis);
            q[(s, s)] = q_shape;
        }
    }
    Ok(MotionModel { transition: f, process_noise: q, dt })
}

/// `μ' = F μ`, `P' = F P Fᵀ + Q`.
pub fn kalman_predict(b: &GaussianBelief, m: &MotionModel) -> Result<GaussianBelief, FilterError> {
    let d = b.dim();
    if m.transition.shape() != (d, d) || m.process_noise.shape() != (d, d) {
        return Err(FilterError::DimensionMismatch(format!(
            "state has {d} entries, transition is {:?}, process noise is {:?}",
            m.transition.shape(),
            m.process_noise.shape()
        )));
    }
    let f = &m.transition;
    let mean = f * &b.mean;
    let cov = f * &b.covariance * f.transpose() + &m.process_noise;
    Ok(GaussianBelief { mean, covariance: symmetrize_and_clamp(&cov) })
}

/// Mean and covariance of `h` applied to `belief`, plus the cross covariance,
/// evaluated on the sigma set.
pub struct UnscentedProjection {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub cross: DMatrix<f64>,
}

/// Pushes the sigma points of `belief` through `h`.
pub fn unscented_transform<H, E>(
    belief: &GaussianBelief,
    h: H,
    params: UtParams,
) -> Result<UnscentedProjection, FilterError>
where
    H: Fn(&DVector<f64>) -> Result<DVector<f64>, E>,
    E: std::fmt::Display,
{
    let sigma = sigma_points(belief, params)?;
    let mut images: Vec<DVector<f64>> = Vec::with_capacity(sigma.len());
    for i in 0..sigma.len() {
        let z = h(&sigma.point(i)).map_err(|e| FilterError::SigmaPointProjectionFailure {
            index: i,
            reason: e.to_string(),
        })?;
        if let Some(first) = images.first() {
            if z.len() != first.len() {
                return Err(FilterError::DimensionMismatch(
                    "measurement function returned inconsistent lengths".into(),
                ));
            }
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(FilterError::SigmaPointProjectionFailure {
                index: i,
                reason: "non-finite measurement".into(),
            });
        }
        images.push(z);
    }
    let m = images[0].len();
    let d = belief.dim();
    let mut mean = DVector::zeros(m);
    for (w, z) in sigma.mean_weights.iter().zip(&images) {
        mean.axpy(*w, z, 1.0);
    }
    let mut covariance = DMatrix::zeros(m, m);
    let mut cross = DMatrix::zeros(d, m);
    for (i, z) in images.iter().enumerate() {
        let w = sigma.cov_weights[i];
        let dz = z - &mean;
        let dx = sigma.point(i) - &belief.mean;
        covariance.ger(w, &dz, &dz, 1.0);
        cross.ger(w, &dx, &dz, 1.0);
    }
    Ok(UnscentedProjection { mean, covariance, cross })
}

/// UKF measurement update of `belief` with measurement `z = h(x) + v`, `v ~ N(0, R)`.
pub fn ukf_update<H, E>(
    belief: &GaussianBelief,
    z: &DVector<f64>,
    h: H,
    noise: &DMatrix<f64>,
    params: UtParams,
) -> Result<GaussianBelief, FilterError>
where
    H: Fn(&DVector<f64>) -> Result<DVector<f64>, E>,
    E: std::fmt::Display,
{
    let m = z.len();
    if noise.shape() != (m, m) {
        return Err(FilterError::DimensionMismatch(format!(
            "measurement has {m} entries, noise is {:?}",
            noise.shape()
        )));
    }
    let proj = unscented_transform(belief, h, params)?;
    if proj.mean.len() != m {
        return Err(FilterError::DimensionMismatch(format!(
            "measurement function returns {} entries, measurement has {m}",
            proj.mean.len()
        )));
    }
    let s = symmetrize_and_clamp(&(proj.covariance + noise));
    let s_inv = invert_innovation(&s)?;
    let gain = &proj.cross * &s_inv;
    let mean = &belief.mean + &gain * (z - &proj.mean);
    let cov = &belief.covariance - &gain * &s * gain.transpose();
    Ok(GaussianBelief { mean, covariance: symmetrize_and_clamp(&cov) })
}

fn invert_innovation(s: &DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    let l = cholesky_with_jitter(s).map_err(|_| FilterError::SingularInnovation)?;
    let chol = nalgebra::Cholesky::pack_dirty(l);
    let inv = chol.inverse();
    if inv.iter().all(|v| v.is_finite()) {
        Ok(inv)
    } else {
        Err(FilterError::SingularInnovation)
    }
}
