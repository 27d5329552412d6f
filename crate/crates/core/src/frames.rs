//! Rigid-body transforms, pinhole projection and finite-difference Jacobians.
//!
//! Frames:
//! - global: right-handed, z up.
//! - body: x forward, y left, z up. Orientation is roll-pitch-yaw applied as
//!   `R = Rz(yaw) * Ry(pitch) * Rx(roll)` (body to global).
//! - camera: +z along the optical axis, +x right, +y down in the image.

use std::f64::consts::{PI, TAU};

use nalgebra::{
    DMatrix, DVector, Isometry3, Matrix6, Point3, Rotation3, Translation3, UnitQuaternion, Vector2,
    Vector3, Vector6,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default central-difference step.
pub const JACOBIAN_STEP: f64 = 1e-6;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_pi(angle: f64) -> f64 {
    let a = (angle + PI).rem_euclid(TAU) - PI;
    if a <= -PI {
        a + TAU
    } else {
        a
    }
}

/// 6-DoF drone pose: global position plus roll, pitch, yaw in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose {
    /// Builds a pose with yaw wrapped to `[0, 2pi)` and roll/pitch to `(-pi, pi]`.
    pub fn new(position: Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> Self {
        Pose {
            position,
            roll: wrap_pi(roll),
            pitch: wrap_pi(pitch),
            yaw: yaw.rem_euclid(TAU) % TAU,
        }
    }

    pub fn level(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose::new(Vector3::new(x, y, z), 0.0, 0.0, yaw)
    }

    pub fn identity() -> Self {
        Pose::new(Vector3::zeros(), 0.0, 0.0, 0.0)
    }

    /// Body-to-global rotation.
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    /// Body-to-global rigid transform.
    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.position),
            UnitQuaternion::from_rotation_matrix(&self.rotation()),
        )
    }

    /// `[x, y, z, roll, pitch, yaw]` without re-wrapping.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.position.x,
            self.position.y,
            self.position.z,
            self.roll,
            self.pitch,
            self.yaw,
        )
    }

    /// Inverse of [`Pose::to_vector`]; angles are normalized.
    pub fn from_slice(v: &[f64]) -> Self {
        Pose::new(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5])
    }

    /// Raw parameter vector to pose without angle normalization. Used inside
    /// Jacobian probes where wrapping would introduce discontinuities.
    pub(crate) fn from_raw(v: &[f64]) -> Self {
        Pose {
            position: Vector3::new(v[0], v[1], v[2]),
            roll: v[3],
            pitch: v[4],
            yaw: v[5],
        }
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Self {
        Pose {
            position: self.position + t,
            ..*self
        }
    }
}

/// 6x6 pose covariance over `[x, y, z, roll, pitch, yaw]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseCovariance(pub Matrix6<f64>);

impl PoseCovariance {
    pub fn zeros() -> Self {
        PoseCovariance(Matrix6::zeros())
    }

    pub fn from_diagonal(d: &[f64; 6]) -> Self {
        PoseCovariance(Matrix6::from_diagonal(&Vector6::from_row_slice(d)))
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        PoseCovariance(self.0 * factor)
    }

    /// Symmetric to `1e-12` relative and PSD to `-1e-9 * trace`.
    pub fn is_valid(&self) -> bool {
        let scale = self.0.abs().max().max(f64::MIN_POSITIVE);
        let asym = (self.0 - self.0.transpose()).abs().max();
        if asym > 1e-12 * scale {
            return false;
        }
        let min_eig = self.0.symmetric_eigenvalues().min();
        min_eig >= -1e-9 * self.trace().abs()
    }
}

/// Rigid mounting of a sensor on the body, as the sensor frame's pose
/// expressed in body coordinates (`p_body = mount * p_sensor`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mount {
    /// Sensor origin in body coordinates (m).
    pub translation: [f64; 3],
    /// Sensor orientation relative to the body as roll, pitch, yaw (rad).
    pub rpy: [f64; 3],
}

impl Mount {
    pub fn identity() -> Self {
        Mount {
            translation: [0.0; 3],
            rpy: [0.0; 3],
        }
    }

    /// Camera looking along body +x with image x to the body's right and
    /// image y down.
    pub fn forward_camera() -> Self {
        Mount {
            translation: [0.0; 3],
            rpy: [-PI / 2.0, 0.0, -PI / 2.0],
        }
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.rpy[0], self.rpy[1], self.rpy[2])
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(self.translation[0], self.translation[1], self.translation[2]),
            UnitQuaternion::from_rotation_matrix(&self.rotation()),
        )
    }
}

/// Pinhole camera with isotropic pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub mount: Mount,
    /// Standard deviation of a detection in the image plane (px).
    pub pixel_sigma: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
            mount: Mount::forward_camera(),
            pixel_sigma: 1.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidConfig("camera focal lengths must be > 0".into()));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidConfig("camera image bounds must be > 0".into()));
        }
        if !(self.pixel_sigma >= 0.0) {
            return Err(Error::InvalidConfig("pixel sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn in_bounds(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x <= self.width && pixel.y >= 0.0 && pixel.y <= self.height
    }
}

/// Outcome of projecting a camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    InImage(Vector2<f64>),
    OutOfBounds(Vector2<f64>),
    Behind,
}

impl Projection {
    pub fn pixel(&self) -> Option<Vector2<f64>> {
        match self {
            Projection::InImage(p) | Projection::OutOfBounds(p) => Some(*p),
            Projection::Behind => None,
        }
    }

    pub fn visible(&self) -> Option<Vector2<f64>> {
        match self {
            Projection::InImage(p) => Some(*p),
            _ => None,
        }
    }
}

/// Global point to camera frame: inverse body pose, then inverse mount.
pub fn world_to_camera(pose: &Pose, camera: &CameraModel, point_world: &Vector3<f64>) -> Vector3<f64> {
    let body = pose.isometry().inverse_transform_point(&Point3::from(*point_world));
    camera.mount.isometry().inverse_transform_point(&body).coords
}

pub fn camera_to_world(pose: &Pose, camera: &CameraModel, point_camera: &Vector3<f64>) -> Vector3<f64> {
    let body = camera.mount.isometry().transform_point(&Point3::from(*point_camera));
    pose.isometry().transform_point(&body).coords
}

/// Pinhole projection without bounds handling; `None` when `z <= 0`.
#[inline]
pub fn pinhole(camera: &CameraModel, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    if p.z <= 0.0 {
        return None;
    }
    Some(Vector2::new(
        camera.fx * p.x / p.z + camera.cx,
        camera.fy * p.y / p.z + camera.cy,
    ))
}

pub fn project(camera: &CameraModel, point_camera: &Vector3<f64>) -> Projection {
    match pinhole(camera, point_camera) {
        None => Projection::Behind,
        Some(px) if camera.in_bounds(&px) => Projection::InImage(px),
        Some(px) => Projection::OutOfBounds(px),
    }
}

/// Central-difference Jacobian of `f` at `at`.
pub fn numeric_jacobian<F>(f: F, at: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = at.len();
    let mut probe = at.clone();
    let mut columns = Vec::with_capacity(n);
    for i in 0..n {
        probe[i] = at[i] + step;
        let plus = f(&probe);
        probe[i] = at[i] - step;
        let minus = f(&probe);
        probe[i] = at[i];
        if plus.len() != minus.len() || plus.iter().chain(minus.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        columns.push((plus - minus) / (2.0 * step));
    }
    let m = columns.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(m, n, |r, c| columns[c][r]))
}
