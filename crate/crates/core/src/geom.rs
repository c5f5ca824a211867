//! Geometry primitives: vectors, rigid transforms, pinhole cameras and
//! weighted rigid alignment.
//!
//! All lengths are meters. Cameras follow the right-handed, `+z` forward
//! convention with the image origin at the top-left pixel.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
/// Position in meters.
pub type Point3 = Vec3;
/// Displacement between temporally adjacent frames, meters.
pub type Motion3 = Vec3;

/// Tolerance on `RᵀR − I` and `det R − 1` for a valid rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate configuration: fewer than 3 weighted non-collinear points")]
    DegenerateConfiguration,
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonpositiveDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("matrix is not a proper rotation")]
    InvalidRotation,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value")]
    NonFinite,
}

/// Skew-symmetric cross-product matrix, `skew(a) * b == a × b`.
pub fn skew(a: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Element of SE(3): `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not orthonormal with
    /// determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeomError> {
        let t = Self {
            rotation,
            translation,
        };
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        if !t.is_valid() {
            return Err(GeomError::InvalidRotation);
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `axis_angle` (direction = axis, norm = angle in radians).
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self {
            rotation: exp_so3(&axis_angle),
            translation,
        }
    }

    /// Rotation about the line through `center`, i.e. `p ↦ R (p − c) + c`.
    pub fn rotation_about(axis_angle: Vec3, center: Point3) -> Self {
        let rotation = exp_so3(&axis_angle);
        Self {
            rotation,
            translation: center - rotation * center,
        }
    }

    pub fn is_valid(&self) -> bool {
        let r = &self.rotation;
        if !r.iter().all(|v| v.is_finite()) {
            return false;
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        ortho <= ROTATION_TOLERANCE && (r.determinant() - 1.0).abs() <= ROTATION_TOLERANCE
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Left-multiplicative update `R ← exp(ω) R`, `t ← t + τ`.
    pub fn perturbed(&self, omega: &Vec3, tau: &Vec3) -> RigidTransform {
        RigidTransform {
            rotation: exp_so3(omega) * self.rotation,
            translation: self.translation + tau,
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

/// `a ∘ b`, i.e. `(a ∘ b)(p) = a(b(p))`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

/// Rodrigues' formula.
pub fn exp_so3(omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    if theta < 1e-12 {
        return Matrix3::identity() + skew(omega);
    }
    Rotation3::from_scaled_axis(*omega).into_inner()
}

/// Weighted least-squares rigid alignment minimizing `Σ wᵢ‖T(srcᵢ) − dstᵢ‖²`.
///
/// Uses the SVD closed form with scale fixed to one; a reflection is
/// corrected by flipping the direction of the smallest singular value.
pub fn rigid_fit(
    src: &[Point3],
    dst: &[Point3],
    weights: &[f64],
) -> Result<RigidTransform, GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() != weights.len() {
        return Err(GeomError::LengthMismatch(src.len(), weights.len()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(GeomError::NonFinite);
    }
    let total: f64 = weights.iter().sum();
    let active = weights.iter().filter(|w| **w > 0.0).count();
    if active < 3 || total <= 0.0 {
        return Err(GeomError::DegenerateConfiguration);
    }

    let mut cs = Vec3::zeros();
    let mut cd = Vec3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        cs += s * *w;
        cd += d * *w;
    }
    cs /= total;
    cd /= total;

    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        let a = s - cs;
        let b = d - cd;
        cov += (a * b.transpose()) * *w;
        scatter += (a * a.transpose()) * *w;
    }

    // Collinear or coincident sources leave a rotation about the line free.
    let sv = scatter.symmetric_eigenvalues();
    let mut ev = [sv[0], sv[1], sv[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0].max(f64::MIN_POSITIVE) {
        return Err(GeomError::DegenerateConfiguration);
    }

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeomError::DegenerateConfiguration),
    };
    // nalgebra sorts singular values in descending order, so the last column
    // is the smallest singular direction.
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = cd - rotation * cs;
    RigidTransform::new(rotation, translation)
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeomError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeomError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeomError::InvalidCamera("cx outside image".into()));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeomError::InvalidCamera("cy outside image".into()));
        }
        Ok(())
    }

    /// Projects a camera-space point to pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Point3) -> Result<(f64, f64), GeomError> {
        if !(p.z > 0.0) {
            return Err(GeomError::BehindCamera(p.z));
        }
        Ok((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    #[inline]
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Point3, GeomError> {
        if !(depth > 0.0) {
            return Err(GeomError::NonpositiveDepth(depth));
        }
        Ok(Point3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// Derivative of `project` with respect to the camera-space point.
    pub fn project_jacobian(&self, p: &Point3) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Pixel containing continuous coordinates `(u, v)`, if inside the image.
    /// Pixel `(i, j)` covers `[i − 0.5, i + 0.5)`.
    #[inline]
    pub fn pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let x = (u + 0.5).floor();
        let y = (v + 0.5).floor();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }
}

/// Camera intrinsics plus the camera center in world coordinates. The camera
/// axes are aligned with the world axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub center: Point3,
}

impl View {
    pub fn new(camera: Camera, center: Point3) -> Self {
        Self { camera, center }
    }

    pub fn at_origin(camera: Camera) -> Self {
        Self {
            camera,
            center: Point3::zeros(),
        }
    }

    #[inline]
    pub fn to_camera(&self, p: &Point3) -> Point3 {
        p - self.center
    }

    #[inline]
    pub fn project(&self, p: &Point3) -> Result<(f64, f64), GeomError> {
        self.camera.project(&self.to_camera(p))
    }

    #[inline]
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Point3, GeomError> {
        Ok(self.camera.backproject(u, v, depth)? + self.center)
    }

    #[inline]
    pub fn depth_of(&self, p: &Point3) -> f64 {
        p.z - self.center.z
    }
}
