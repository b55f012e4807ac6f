//! IMU preintegration between two keyframes.
//!
//! Integration uses the midpoint rule in the body frame of the first sample.
//! First-order bias Jacobians allow re-linearisation without re-integrating.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hat, right_jacobian, right_jacobian_inv, so3_exp, so3_log, Mat3, Vec3};
use crate::sim::ImuSample;

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Vector15 = SVector<f64, 15>;

/// Continuous-time noise model used for covariance propagation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuNoiseModel {
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_random_walk: f64,
    pub accel_random_walk: f64,
}

impl Default for ImuNoiseModel {
    fn default() -> Self {
        Self {
            gyro_noise_density: 1.7e-3,
            accel_noise_density: 2.0e-2,
            gyro_random_walk: 2.0e-5,
            accel_random_walk: 3.0e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuPreintegration {
    pub delta_r: UnitQuaternion<f64>,
    pub delta_v: Vec3,
    pub delta_p: Vec3,
    /// Covariance of `[δθ, δv, δp]`.
    pub covariance: Matrix9,
    pub bias_gyro: Vec3,
    pub bias_accel: Vec3,
    pub dt_total: f64,
    pub dr_dbg: Mat3,
    pub dv_dbg: Mat3,
    pub dv_dba: Mat3,
    pub dp_dbg: Mat3,
    pub dp_dba: Mat3,
}

/// Integrates `samples` (the first and last bound the interval) with the given biases.
pub fn preintegrate(samples: &[ImuSample], bias_gyro: &Vec3, bias_accel: &Vec3, noise: &ImuNoiseModel) -> Result<ImuPreintegration> {
    if samples.len() < 2 {
        return Err(Error::param("preintegration needs at least two IMU samples"));
    }
    let mut pre = ImuPreintegration {
        delta_r: UnitQuaternion::identity(),
        delta_v: Vec3::zeros(),
        delta_p: Vec3::zeros(),
        covariance: Matrix9::zeros(),
        bias_gyro: *bias_gyro,
        bias_accel: *bias_accel,
        dt_total: 0.0,
        dr_dbg: Mat3::zeros(),
        dv_dbg: Mat3::zeros(),
        dv_dba: Mat3::zeros(),
        dp_dbg: Mat3::zeros(),
        dp_dba: Mat3::zeros(),
    };
    for w in samples.windows(2) {
        let dt = w[1].t - w[0].t;
        if !(dt > 0.0) {
            return Err(Error::param(format!("IMU timestamps not increasing at t = {}", w[1].t)));
        }
        pre.step(&w[0], &w[1], dt, noise);
    }
    Ok(pre)
}

impl ImuPreintegration {
    fn step(&mut self, a: &ImuSample, b: &ImuSample, dt: f64, noise: &ImuNoiseModel) {
        let w = 0.5 * (a.gyro + b.gyro) - self.bias_gyro;
        let acc0 = a.accel - self.bias_accel;
        let acc1 = b.accel - self.bias_accel;
        let dr_step = so3_exp(&(w * dt));
        let r0 = self.delta_r.to_rotation_matrix().into_inner();
        let r1q = self.delta_r * dr_step;
        let r1 = r1q.to_rotation_matrix().into_inner();
        let acc_w = 0.5 * (r0 * acc0 + r1 * acc1);
        let acc_body = 0.5 * (acc0 + acc1);
        let jr = right_jacobian(&(w * dt));
        let drt = dr_step.to_rotation_matrix().into_inner().transpose();
        let ra_hat = r0 * hat(&acc_body);

        // Bias Jacobians of the discrete midpoint scheme.
        let dr_dbg_next = drt * self.dr_dbg - jr * dt;
        let dacc_dbg = -0.5 * (r0 * hat(&acc0) * self.dr_dbg + r1 * hat(&acc1) * dr_dbg_next);
        let dacc_dba = -0.5 * (r0 + r1);
        self.dp_dbg += self.dv_dbg * dt + 0.5 * dacc_dbg * dt * dt;
        self.dp_dba += self.dv_dba * dt + 0.5 * dacc_dba * dt * dt;
        self.dv_dbg += dacc_dbg * dt;
        self.dv_dba += dacc_dba * dt;
        self.dr_dbg = dr_dbg_next;

        // Covariance of [θ, v, p].
        let mut f = Matrix9::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&drt);
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ra_hat * dt));
        f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-0.5 * ra_hat * dt * dt));
        f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Mat3::identity() * dt));
        let mut g = SMatrix::<f64, 9, 6>::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(r0 * dt));
        g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(0.5 * r0 * dt * dt));
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        let sg = noise.gyro_noise_density.powi(2) / dt;
        let sa = noise.accel_noise_density.powi(2) / dt;
        q.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Mat3::identity() * sg));
        q.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Mat3::identity() * sa));
        self.covariance = f * self.covariance * f.transpose() + g * q * g.transpose();
        self.covariance = 0.5 * (self.covariance + self.covariance.transpose());

        self.delta_p += self.delta_v * dt + 0.5 * acc_w * dt * dt;
        self.delta_v += acc_w * dt;
        self.delta_r = r1q;
        self.delta_r.renormalize();
        self.dt_total += dt;
    }

    /// Bias-corrected `(ΔR, Δv, Δp)` at new bias estimates.
    pub fn corrected(&self, bg: &Vec3, ba: &Vec3) -> (UnitQuaternion<f64>, Vec3, Vec3) {
        let dbg = bg - self.bias_gyro;
        let dba = ba - self.bias_accel;
        (
            self.delta_r * so3_exp(&(self.dr_dbg * dbg)),
            self.delta_v + self.dv_dbg * dbg + self.dv_dba * dba,
            self.delta_p + self.dp_dbg * dbg + self.dp_dba * dba,
        )
    }

    /// Predicts the state at the end of the interval.
    pub fn predict(&self, start: &KinematicState, gravity: &Vec3) -> KinematicState {
        let (dr, dv, dp) = self.corrected(&start.bias_gyro, &start.bias_accel);
        let t = self.dt_total;
        let ri = start.rotation;
        KinematicState {
            rotation: ri * dr,
            velocity: start.velocity + gravity * t + ri * dv,
            position: start.position + start.velocity * t + 0.5 * gravity * t * t + ri * dp,
            bias_gyro: start.bias_gyro,
            bias_accel: start.bias_accel,
        }
    }

    /// Information of the 15-dimensional residual `[θ, v, p, bg, ba]`.
    pub fn information(&self, noise: &ImuNoiseModel) -> Matrix15 {
        let mut cov = Matrix15::zeros();
        cov.fixed_view_mut::<9, 9>(0, 0).copy_from(&self.covariance);
        let t = self.dt_total;
        let wg = (noise.gyro_random_walk.powi(2) * t).max(1e-12);
        let wa = (noise.accel_random_walk.powi(2) * t).max(1e-12);
        for i in 0..3 {
            cov[(9 + i, 9 + i)] = wg;
            cov[(12 + i, 12 + i)] = wa;
        }
        for i in 0..9 {
            cov[(i, i)] += 1e-12;
        }
        let mut info = cov.try_inverse().unwrap_or_else(Matrix15::zeros);
        info = 0.5 * (info + info.transpose());
        info
    }
}

/// Navigation state of one keyframe used by the IMU residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicState {
    pub rotation: UnitQuaternion<f64>,
    pub position: Vec3,
    pub velocity: Vec3,
    pub bias_gyro: Vec3,
    pub bias_accel: Vec3,
}

/// Residual `[r_θ, r_v, r_p, r_bg, r_ba]` and its Jacobians w.r.t. the 15-dimensional
/// error states `[δp, δθ, δv, δbg, δba]` of keyframes `i` and `j`.
pub fn imu_residual(
    pre: &ImuPreintegration,
    si: &KinematicState,
    sj: &KinematicState,
    gravity: &Vec3,
) -> (Vector15, Matrix15, Matrix15) {
    let (dr, dv, dp) = pre.corrected(&si.bias_gyro, &si.bias_accel);
    let t = pre.dt_total;
    let ri = si.rotation.to_rotation_matrix().into_inner();
    let rj = sj.rotation.to_rotation_matrix().into_inner();
    let rit = ri.transpose();
    let er = dr.inverse() * si.rotation.inverse() * sj.rotation;
    let r_theta = so3_log(&er);
    let dvw = sj.velocity - si.velocity - gravity * t;
    let dpw = sj.position - si.position - si.velocity * t - 0.5 * gravity * t * t;
    let r_v = rit * dvw - dv;
    let r_p = rit * dpw - dp;
    let r_bg = sj.bias_gyro - si.bias_gyro;
    let r_ba = sj.bias_accel - si.bias_accel;
    let mut r = Vector15::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_theta);
    r.fixed_rows_mut::<3>(3).copy_from(&r_v);
    r.fixed_rows_mut::<3>(6).copy_from(&r_p);
    r.fixed_rows_mut::<3>(9).copy_from(&r_bg);
    r.fixed_rows_mut::<3>(12).copy_from(&r_ba);

    let jr_inv = right_jacobian_inv(&r_theta);
    let dbg = si.bias_gyro - pre.bias_gyro;
    let er_m = er.to_rotation_matrix().into_inner();
    let j_theta_bg = -jr_inv * er_m.transpose() * right_jacobian(&(pre.dr_dbg * dbg)) * pre.dr_dbg;

    // State layout per keyframe: p 0, θ 3, v 6, bg 9, ba 12.
    let mut ji = Matrix15::zeros();
    let mut jj = Matrix15::zeros();
    let set = |m: &mut Matrix15, row: usize, col: usize, b: Matrix3<f64>| m.fixed_view_mut::<3, 3>(row, col).copy_from(&b);
    set(&mut ji, 0, 3, -jr_inv * rj.transpose() * ri);
    set(&mut ji, 0, 9, j_theta_bg);
    set(&mut jj, 0, 3, jr_inv);

    set(&mut ji, 3, 3, hat(&(rit * dvw)));
    set(&mut ji, 3, 6, -rit);
    set(&mut ji, 3, 9, -pre.dv_dbg);
    set(&mut ji, 3, 12, -pre.dv_dba);
    set(&mut jj, 3, 6, rit);

    set(&mut ji, 6, 0, -rit);
    set(&mut ji, 6, 3, hat(&(rit * dpw)));
    set(&mut ji, 6, 6, -rit * t);
    set(&mut ji, 6, 9, -pre.dp_dbg);
    set(&mut ji, 6, 12, -pre.dp_dba);
    set(&mut jj, 6, 0, rit);

    set(&mut ji, 9, 9, -Mat3::identity());
    set(&mut jj, 9, 9, Mat3::identity());
    set(&mut ji, 12, 12, -Mat3::identity());
    set(&mut jj, 12, 12, Mat3::identity());
    (r, ji, jj)
}

/// Applies a 15-dimensional error-state increment.
pub fn retract_state(s: &KinematicState, d: &Vector15) -> KinematicState {
    let mut rotation = s.rotation * so3_exp(&d.fixed_rows::<3>(3).into_owned());
    rotation.renormalize();
    KinematicState {
        rotation,
        position: s.position + d.fixed_rows::<3>(0),
        velocity: s.velocity + d.fixed_rows::<3>(6),
        bias_gyro: s.bias_gyro + d.fixed_rows::<3>(9),
        bias_accel: s.bias_accel + d.fixed_rows::<3>(12),
    }
}
