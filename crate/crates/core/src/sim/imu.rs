//! Inertial measurement synthesis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::sim::trajectory::Trajectory;

/// One gyroscope + accelerometer reading in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// rad/s.
    pub gyro: Vec3,
    /// m/s², specific force (includes the gravity reaction).
    pub accel: Vec3,
}

/// Continuous-time white-noise densities and constant biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuNoise {
    /// rad/s/√Hz.
    pub gyro_noise_density: f64,
    /// m/s²/√Hz.
    pub accel_noise_density: f64,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
    pub seed: u64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
            seed: 0,
        }
    }
}

/// Standard gravity in the z-up world frame.
pub fn standard_gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, -9.81)
}

/// Samples `traj` at `rate` Hz over `[0, duration]`.
pub fn simulate_imu(traj: &dyn Trajectory, rate: f64, gravity: &Vec3, noise: &ImuNoise) -> Result<Vec<ImuSample>> {
    if !(rate > 0.0) {
        return Err(Error::param("IMU rate must be positive"));
    }
    let n = (traj.duration() * rate + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let sg = noise.gyro_noise_density * rate.sqrt();
    let sa = noise.accel_noise_density * rate.sqrt();
    let gn = Normal::new(0.0, sg).map_err(|e| Error::param(e.to_string()))?;
    let an = Normal::new(0.0, sa).map_err(|e| Error::param(e.to_string()))?;
    let bg = Vec3::from(noise.gyro_bias);
    let ba = Vec3::from(noise.accel_bias);
    let mut draw = |d: &Normal<f64>, s: f64| {
        if s > 0.0 {
            Vec3::new(d.sample(&mut rng), d.sample(&mut rng), d.sample(&mut rng))
        } else {
            Vec3::zeros()
        }
    };
    Ok((0..=n)
        .map(|k| {
            let t = k as f64 / rate;
            let r = traj.pose(t).rotation;
            let gyro = traj.angular_velocity(t) + bg + draw(&gn, sg);
            let accel = r.inverse() * (traj.acceleration(t) - gravity) + ba + draw(&an, sa);
            ImuSample { t, gyro, accel }
        })
        .collect())
}
