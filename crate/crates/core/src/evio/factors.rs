//! Residuals and analytic Jacobians for the sliding-window cost.
//!
//! Pose Jacobians are taken w.r.t. `[δp, δθ]` with `p ← p + δp`, `R ← R·Exp(δθ)`.

use nalgebra::{Matrix2x1, Matrix2x6, Matrix6, Vector2, Vector6};

use crate::camera::{CameraModel, Pixel};
use crate::geometry::{hat, right_jacobian_inv, so3_log, Pose, Vec3};

/// Reprojection residual of an anchored inverse-depth landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Reprojection {
    pub residual: Vector2<f64>,
    pub d_anchor: Matrix2x6<f64>,
    pub d_target: Matrix2x6<f64>,
    pub d_inverse_depth: Matrix2x1<f64>,
}

/// `obs_k − π(T_e_b · T_b_k_w · T_w_b_i · T_b_e · π⁻¹(anchor_px, λ))`.
///
/// Returns `None` when the point lands behind the observing camera.
pub fn event_reprojection_residual(
    anchor_px: &Pixel,
    observed_px: &Pixel,
    inverse_depth: f64,
    pose_i: &Pose,
    pose_k: &Pose,
    camera: &CameraModel,
    extrinsic: &Pose,
) -> Option<Reprojection> {
    if !(inverse_depth > 0.0) {
        return None;
    }
    let r_be = extrinsic.rotation_matrix();
    let ri = pose_i.rotation_matrix();
    let rk = pose_k.rotation_matrix();
    let f_ci = camera.back_project_pinhole(anchor_px, inverse_depth);
    let f_bi = r_be * f_ci + extrinsic.translation;
    let f_w = ri * f_bi + pose_i.translation;
    let f_bk = rk.transpose() * (f_w - pose_k.translation);
    let f_ck = r_be.transpose() * (f_bk - extrinsic.translation);
    if f_ck.z <= 1e-6 {
        return None;
    }
    let residual = observed_px - camera.project_pinhole(&f_ck);
    let dpi = -camera.project_pinhole_jacobian(&f_ck);
    let a = dpi * r_be.transpose();
    let ak = a * rk.transpose();

    let mut d_anchor = Matrix2x6::zeros();
    d_anchor.fixed_view_mut::<2, 3>(0, 0).copy_from(&ak);
    d_anchor.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-ak * ri * hat(&f_bi)));
    let mut d_target = Matrix2x6::zeros();
    d_target.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-ak));
    d_target.fixed_view_mut::<2, 3>(0, 3).copy_from(&(a * hat(&f_bk)));
    let d_inverse_depth = ak * ri * r_be * (-f_ci / inverse_depth);
    Some(Reprojection {
        residual,
        d_anchor,
        d_target,
        d_inverse_depth,
    })
}

/// Relative-pose residual `log(ΔT · T_wi⁻¹ · T_wk)` with Jacobians w.r.t. both poses.
pub fn relative_pose_factor(delta_t: &Pose, pose_i: &Pose, pose_k: &Pose) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let rd = delta_t.rotation_matrix();
    let ri = pose_i.rotation_matrix();
    let rk = pose_k.rotation_matrix();
    let rel = ri.transpose() * (pose_k.translation - pose_i.translation);
    let t_e = rd * rel + delta_t.translation;
    let r_e = delta_t.rotation * pose_i.rotation.inverse() * pose_k.rotation;
    let phi = so3_log(&r_e);
    let jinv = right_jacobian_inv(&phi);
    let rdri = rd * ri.transpose();

    let mut ji = Matrix6::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rdri));
    ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rd * hat(&rel)));
    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-jinv * rk.transpose() * ri));
    let mut jk = Matrix6::zeros();
    jk.fixed_view_mut::<3, 3>(0, 0).copy_from(&rdri);
    jk.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&t_e);
    r.fixed_rows_mut::<3>(3).copy_from(&phi);
    (r, ji, jk)
}

/// Huber IRLS weight for a residual of norm `e`.
pub fn huber_weight(e: f64, delta: f64) -> f64 {
    if e <= delta {
        1.0
    } else {
        delta / e
    }
}

/// Huber cost `ρ(e²)` for a residual of norm `e`.
pub fn huber_cost(e: f64, delta: f64) -> f64 {
    if e <= delta {
        e * e
    } else {
        2.0 * delta * e - delta * delta
    }
}

/// Pinhole projection of a world point into the camera of body pose `pose`.
pub fn project_world(point_w: &Vec3, pose: &Pose, camera: &CameraModel, extrinsic: &Pose) -> Option<Pixel> {
    let xc = (*pose * *extrinsic).inverse_transform_point(point_w);
    (xc.z > 1e-6).then(|| camera.project_pinhole(&xc))
}

/// World point of an anchored inverse-depth landmark.
pub fn landmark_world(anchor_px: &Pixel, inverse_depth: f64, pose_i: &Pose, camera: &CameraModel, extrinsic: &Pose) -> Vec3 {
    (*pose_i * *extrinsic).transform_point(&camera.back_project_pinhole(anchor_px, inverse_depth))
}
