//! Poses, rigid transforms, and roll-pitch-yaw conventions.
//!
//! Orientation is parameterized everywhere as extrinsic X-Y-Z roll-pitch-yaw:
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`, all angles wrapped to `(-pi, pi]`.
//! The representation is singular at `pitch = +-pi/2`; conversions that hit
//! the singularity return [`GeometryError::SingularRepresentation`] instead
//! of producing garbage.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the guard band around `pitch = +-pi/2` treated as singular.
pub const GIMBAL_LOCK_TOL: f64 = 1e-6;

/// Max deviation from orthonormality accepted when building a [`Transform`].
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    /// The matrix is not a proper rotation (orthonormal, determinant +1).
    #[error("matrix is not a rotation: max |R^T R - I| = {deviation:.3e}")]
    InvalidRotation { deviation: f64 },
    /// Roll-pitch-yaw extraction attempted within the gimbal-lock band.
    #[error("orientation within {GIMBAL_LOCK_TOL:.0e} of pitch = +-pi/2; roll-pitch-yaw is singular there")]
    SingularRepresentation,
}

/// Wraps an angle to the half-open interval `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -std::f64::consts::PI && a <= std::f64::consts::PI {
        return a;
    }
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

/// Shortest signed angular difference `a - b`, wrapped to `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Skew-symmetric cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix for extrinsic X-Y-Z roll-pitch-yaw angles.
pub fn rpy_to_matrix(alpha: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = alpha.x.sin_cos();
    let (sp, cp) = alpha.y.sin_cos();
    let (sy, cy) = alpha.z.sin_cos();
    // Rz(yaw) * Ry(pitch) * Rx(roll), expanded.
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Extracts roll-pitch-yaw from a rotation matrix.
///
/// Fails with [`GeometryError::SingularRepresentation`] when the pitch is
/// within [`GIMBAL_LOCK_TOL`] of `+-pi/2`.
pub fn matrix_to_rpy(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if std::f64::consts::FRAC_PI_2 - pitch.abs() < GIMBAL_LOCK_TOL {
        return Err(GeometryError::SingularRepresentation);
    }
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Ok(Vector3::new(roll, pitch, yaw))
}

/// Rate matrix `B(alpha)` mapping roll-pitch-yaw rates to the world-frame
/// angular velocity: `omega = B(alpha) * alpha_dot`.
pub fn rpy_rate_matrix(alpha: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = alpha.y.sin_cos();
    let (sy, cy) = alpha.z.sin_cos();
    Matrix3::new(cp * cy, -sy, 0.0, cp * sy, cy, 0.0, -sp, 0.0, 1.0)
}

/// Closed-form inverse of [`rpy_rate_matrix`]: `alpha_dot = B^-1 * omega`.
///
/// Singular at gimbal lock (`det B = cos(pitch)`).
pub fn rpy_rate_matrix_inv(alpha: &Vector3<f64>) -> Result<Matrix3<f64>, GeometryError> {
    let (sp, cp) = alpha.y.sin_cos();
    let (sy, cy) = alpha.z.sin_cos();
    if cp.abs() < GIMBAL_LOCK_TOL {
        return Err(GeometryError::SingularRepresentation);
    }
    let tp = sp / cp;
    Ok(Matrix3::new(
        cy / cp,
        sy / cp,
        0.0,
        -sy,
        cy,
        0.0,
        tp * cy,
        tp * sy,
        1.0,
    ))
}

/// A 6-DOF pose: position plus roll-pitch-yaw orientation.
///
/// Angles are wrapped to `(-pi, pi]` on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "Pose6Repr", into = "Pose6Repr")]
pub struct Pose6 {
    pub p: Vector3<f64>,
    pub alpha: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct Pose6Repr {
    p: [f64; 3],
    rpy: [f64; 3],
}

impl From<Pose6Repr> for Pose6 {
    fn from(r: Pose6Repr) -> Self {
        Pose6::new(Vector3::from(r.p), Vector3::from(r.rpy))
    }
}

impl From<Pose6> for Pose6Repr {
    fn from(p: Pose6) -> Self {
        Pose6Repr {
            p: p.p.into(),
            rpy: p.alpha.into(),
        }
    }
}

impl Pose6 {
    pub fn new(p: Vector3<f64>, alpha: Vector3<f64>) -> Self {
        Pose6 {
            p,
            alpha: alpha.map(wrap_angle),
        }
    }

    pub fn from_parts(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Pose6::new(Vector3::new(x, y, z), Vector3::new(roll, pitch, yaw))
    }

    pub fn identity() -> Self {
        Pose6 {
            p: Vector3::zeros(),
            alpha: Vector3::zeros(),
        }
    }

    /// The equivalent rigid transform.
    pub fn to_transform(&self) -> Transform {
        Transform {
            r: rpy_to_matrix(&self.alpha),
            t: self.p,
        }
    }

    /// Stacks the pose into a 6-vector `[p; alpha]`.
    pub fn to_vector(&self) -> nalgebra::Vector6<f64> {
        nalgebra::Vector6::new(
            self.p.x, self.p.y, self.p.z, self.alpha.x, self.alpha.y, self.alpha.z,
        )
    }

    /// Component-wise difference `self - other` with wrapped angle parts.
    pub fn diff(&self, other: &Pose6) -> nalgebra::Vector6<f64> {
        let dp = self.p - other.p;
        nalgebra::Vector6::new(
            dp.x,
            dp.y,
            dp.z,
            angle_diff(self.alpha.x, other.alpha.x),
            angle_diff(self.alpha.y, other.alpha.y),
            angle_diff(self.alpha.z, other.alpha.z),
        )
    }
}

/// A rigid transform (proper rotation plus translation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Transform {
    /// Builds a transform, validating that `r` is a proper rotation.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, GeometryError> {
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det_dev = (r.determinant() - 1.0).abs();
        if dev > ROTATION_TOL || det_dev > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation {
                deviation: dev.max(det_dev),
            });
        }
        Ok(Transform { r, t })
    }

    /// Builds a transform from parts already known to be valid (products of
    /// valid rotations). Debug builds still assert validity.
    pub fn from_parts_unchecked(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        debug_assert!(
            (r.transpose() * r - Matrix3::identity()).abs().max() < 1e-7,
            "rotation drifted from orthonormality"
        );
        Transform { r, t }
    }

    pub fn identity() -> Self {
        Transform {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    /// Composition `self * other` (apply `other` first).
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    /// The inverse transform.
    pub fn invert(&self) -> Transform {
        let rt = self.r.transpose();
        Transform {
            r: rt,
            t: -(rt * self.t),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.r * v
    }

    /// Converts to a [`Pose6`]; fails at gimbal lock.
    pub fn to_pose(&self) -> Result<Pose6, GeometryError> {
        Ok(Pose6 {
            p: self.t,
            alpha: matrix_to_rpy(&self.r)?,
        })
    }
}
