//! Analytic, twice-differentiable body trajectories.

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec3};

/// Continuous-time body motion `T^w_b(t)` with analytic derivatives.
pub trait Trajectory: Send + Sync {
    fn duration(&self) -> f64;
    /// `T^w_b(t)`.
    fn pose(&self, t: f64) -> Pose;
    /// World-frame velocity.
    fn velocity(&self, t: f64) -> Vec3;
    /// World-frame acceleration.
    fn acceleration(&self, t: f64) -> Vec3;
    /// Body-frame angular velocity.
    fn angular_velocity(&self, t: f64) -> Vec3;
}

/// `c(t) = offset + rate·t + amplitude·sin(2π·frequency·t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Channel {
    pub offset: f64,
    pub rate: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Channel {
    pub fn constant(offset: f64) -> Self {
        Self {
            offset,
            ..Default::default()
        }
    }

    pub fn linear(offset: f64, rate: f64) -> Self {
        Self {
            offset,
            rate,
            ..Default::default()
        }
    }

    pub fn sine(offset: f64, amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self {
            offset,
            rate: 0.0,
            amplitude,
            frequency,
            phase,
        }
    }

    fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.frequency
    }

    pub fn value(&self, t: f64) -> f64 {
        self.offset + self.rate * t + self.amplitude * (self.omega() * t + self.phase).sin()
    }

    pub fn d1(&self, t: f64) -> f64 {
        let w = self.omega();
        self.rate + self.amplitude * w * (w * t + self.phase).cos()
    }

    pub fn d2(&self, t: f64) -> f64 {
        let w = self.omega();
        -self.amplitude * w * w * (w * t + self.phase).sin()
    }
}

/// Position channels per world axis and Z-Y-X Euler angle channels
/// (`R = Rz(yaw)·Ry(pitch)·Rx(roll)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticTrajectory {
    pub position: [Channel; 3],
    pub roll: Channel,
    pub pitch: Channel,
    pub yaw: Channel,
    pub duration: f64,
}

impl AnalyticTrajectory {
    pub fn stationary(pose_xyz: Vec3, yaw: f64, duration: f64) -> Self {
        Self {
            position: [
                Channel::constant(pose_xyz.x),
                Channel::constant(pose_xyz.y),
                Channel::constant(pose_xyz.z),
            ],
            roll: Channel::default(),
            pitch: Channel::default(),
            yaw: Channel::constant(yaw),
            duration,
        }
    }

    /// Smooth figure-like motion with moderate rotation, used by the IMU checks.
    pub fn smooth_wobble(duration: f64) -> Self {
        Self {
            position: [
                Channel::sine(0.0, 0.4, 0.25, 0.3),
                Channel::sine(0.1, 0.3, 0.2, 1.1),
                Channel::sine(0.0, 0.15, 0.3, -0.4),
            ],
            roll: Channel::sine(0.0, 0.1, 0.3, 0.2),
            pitch: Channel::sine(0.0, 0.12, 0.25, 0.9),
            yaw: Channel::sine(0.2, 0.35, 0.15, -0.5),
            duration,
        }
    }

    /// Circle of `radius` in the horizontal plane with the body yawing along the tangent.
    pub fn circle(radius: f64, period: f64, duration: f64) -> Self {
        let f = 1.0 / period;
        let half_pi = std::f64::consts::FRAC_PI_2;
        Self {
            position: [
                Channel::sine(0.0, radius, f, half_pi),
                Channel::sine(0.0, radius, f, 0.0),
                Channel::constant(0.0),
            ],
            roll: Channel::default(),
            pitch: Channel::default(),
            yaw: Channel::linear(half_pi, 2.0 * std::f64::consts::PI * f),
            duration,
        }
    }

    fn angles(&self, t: f64) -> (f64, f64, f64) {
        (self.roll.value(t), self.pitch.value(t), self.yaw.value(t))
    }
}

pub(crate) fn rotation_zyx(roll: f64, pitch: f64, yaw: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vec3::z_axis(), yaw)
        * UnitQuaternion::from_axis_angle(&Vec3::y_axis(), pitch)
        * UnitQuaternion::from_axis_angle(&Vec3::x_axis(), roll)
}

impl Trajectory for AnalyticTrajectory {
    fn duration(&self) -> f64 {
        self.duration
    }

    fn pose(&self, t: f64) -> Pose {
        let (r, p, y) = self.angles(t);
        Pose::new(
            rotation_zyx(r, p, y),
            Vec3::new(
                self.position[0].value(t),
                self.position[1].value(t),
                self.position[2].value(t),
            ),
        )
    }

    fn velocity(&self, t: f64) -> Vec3 {
        Vec3::new(
            self.position[0].d1(t),
            self.position[1].d1(t),
            self.position[2].d1(t),
        )
    }

    fn acceleration(&self, t: f64) -> Vec3 {
        Vec3::new(
            self.position[0].d2(t),
            self.position[1].d2(t),
            self.position[2].d2(t),
        )
    }

    fn angular_velocity(&self, t: f64) -> Vec3 {
        let (r, p, _) = self.angles(t);
        let (dr, dp, dy) = (self.roll.d1(t), self.pitch.d1(t), self.yaw.d1(t));
        Vec3::new(
            dr - dy * p.sin(),
            dp * r.cos() + dy * p.cos() * r.sin(),
            dy * p.cos() * r.cos() - dp * r.sin(),
        )
    }
}
