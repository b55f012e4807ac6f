//! Rigid-body poses and SO(3) helpers.
//!
//! Rotations are perturbed on the right (`R ← R·Exp(δθ)`) and positions in the
//! world frame (`p ← p + δp`) everywhere in the estimator.

use std::ops::Mul;

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Skew-symmetric matrix such that `hat(a) * b == a × b`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from a rotation vector.
pub fn so3_exp(phi: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*phi)
}

/// Logarithm map to a rotation vector with angle in `[0, π]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    // nalgebra's scaled_axis keeps the angle in [0, π] by sign-normalising w.
    let mut q = *q;
    if q.w < 0.0 {
        q = UnitQuaternion::new_unchecked(-q.into_inner());
    }
    q.scaled_axis()
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let h = hat(phi);
    if theta < 1e-6 {
        return Mat3::identity() - 0.5 * h + h * h / 6.0;
    }
    let t2 = theta * theta;
    Mat3::identity() - (1.0 - theta.cos()) / t2 * h + (theta - theta.sin()) / (t2 * theta) * h * h
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let h = hat(phi);
    if theta < 1e-6 {
        return Mat3::identity() + 0.5 * h + h * h / 12.0;
    }
    let t2 = theta * theta;
    let coef = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * h + coef * h * h
}

/// A rigid transform `x ↦ R·x + t`.
///
/// When used as `T^a_b` it maps coordinates expressed in frame `b` into frame `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation(r: UnitQuaternion<f64>) -> Self {
        Self::new(r, Vec3::zeros())
    }

    /// Builds a pose from `(qx, qy, qz, qw)` and a translation, normalising the quaternion.
    pub fn from_quaternion_xyzw(q: [f64; 4], t: Vec3) -> Self {
        let q = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        Self::new(UnitQuaternion::from_quaternion(q), t)
    }

    /// Quaternion coefficients in `(qx, qy, qz, qw)` order.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -(r_inv * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_point3(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.transform_point(&p.coords))
    }

    /// Applies the inverse transform without building it.
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    /// `[translation; rotation vector]`.
    pub fn log(&self) -> Vector6<f64> {
        let r = so3_log(&self.rotation);
        Vector6::new(
            self.translation.x,
            self.translation.y,
            self.translation.z,
            r.x,
            r.y,
            r.z,
        )
    }

    /// Inverse of [`Pose::log`].
    pub fn exp(v: &Vector6<f64>) -> Self {
        Self::new(
            so3_exp(&Vec3::new(v[3], v[4], v[5])),
            Vec3::new(v[0], v[1], v[2]),
        )
    }

    /// Right-perturbed retraction used by the optimiser.
    pub fn retract(&self, dp: &Vec3, dtheta: &Vec3) -> Self {
        let mut rotation = self.rotation * so3_exp(dtheta);
        rotation.renormalize();
        Self::new(rotation, self.translation + dp)
    }

    /// Rotation angle of the transform in radians.
    pub fn angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }

    /// Interpolates translation linearly and rotation by slerp, `s ∈ [0, 1]`.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        let rotation = self
            .rotation
            .try_slerp(&other.rotation, s, 1e-12)
            .unwrap_or(self.rotation);
        Pose::new(
            rotation,
            self.translation + (other.translation - self.translation) * s,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Adjoint of a pose acting on `[translation; rotation]` twists.
pub fn adjoint(p: &Pose) -> nalgebra::Matrix6<f64> {
    let r = p.rotation_matrix();
    let mut ad = nalgebra::Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(hat(&p.translation) * r));
    ad
}
