//! Trajectory and depth accuracy metrics.

use nalgebra::{Matrix3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::image::DepthMap;

/// Pairs each estimate with the nearest ground-truth stamp within `gate` seconds.
pub fn associate(estimate: &[(f64, Pose)], groundtruth: &[(f64, Pose)], gate: f64) -> Vec<(Pose, Pose)> {
    let mut out = Vec::new();
    if groundtruth.is_empty() {
        return out;
    }
    for (t, p) in estimate {
        let i = groundtruth.partition_point(|g| g.0 < *t);
        let best = [i.checked_sub(1), (i < groundtruth.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (groundtruth[a].0 - t).abs().total_cmp(&(groundtruth[b].0 - t).abs()));
        if let Some(j) = best {
            if (groundtruth[j].0 - t).abs() <= gate {
                out.push((*p, groundtruth[j].1));
            }
        }
    }
    out
}

/// Closed-form rigid transform `T` minimising `Σ‖T·a_i − b_i‖²` (Horn/Umeyama, no scale).
pub fn align_rigid(a: &[Vec3], b: &[Vec3]) -> Result<Pose> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::Association(format!("need at least 3 point pairs, got {}", a.len().min(b.len()))));
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vec3>() / n;
    let cb = b.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        cov += (q - cb) * (p - ca).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let rotation = UnitQuaternion::from_matrix(&r);
    Ok(Pose::new(rotation, cb - rotation * ca))
}

/// Translation RMSE after rigid alignment of the associated pairs `(estimate, truth)`.
pub fn absolute_trajectory_error(pairs: &[(Pose, Pose)]) -> Result<f64> {
    let a: Vec<Vec3> = pairs.iter().map(|(e, _)| e.translation).collect();
    let b: Vec<Vec3> = pairs.iter().map(|(_, g)| g.translation).collect();
    let t = align_rigid(&a, &b)?;
    let sq: f64 = a.iter().zip(&b).map(|(p, q)| (t.transform_point(p) - q).norm_squared()).sum();
    Ok((sq / a.len() as f64).sqrt())
}

/// Associates with a 10 ms gate and returns the ATE.
pub fn evaluate_trajectory(estimate: &[(f64, Pose)], groundtruth: &[(f64, Pose)]) -> Result<f64> {
    let pairs = associate(estimate, groundtruth, 0.01);
    if pairs.len() < 3 {
        return Err(Error::Association(format!(
            "only {} of {} poses matched ground truth within 10 ms",
            pairs.len(),
            estimate.len()
        )));
    }
    absolute_trajectory_error(&pairs)
}

/// Path length of a trajectory.
pub fn trajectory_length(poses: &[(f64, Pose)]) -> f64 {
    poses.windows(2).map(|w| (w[1].1.translation - w[0].1.translation).norm()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthMetrics {
    /// Mean absolute error over all ground-truth pixels, failures counted as depth 0.
    pub mean_error: f64,
    /// Mean absolute error over pixels with an estimate.
    pub valid_mean_error: f64,
    /// Estimated pixels over ground-truth pixels, in percent.
    pub density: f64,
    pub ground_truth_pixels: usize,
}

pub fn depth_metrics(estimate: &DepthMap, truth: &DepthMap) -> Result<DepthMetrics> {
    if estimate.width() != truth.width() || estimate.height() != truth.height() {
        return Err(Error::param("depth maps differ in size"));
    }
    let (mut total, mut n, mut valid_sum, mut valid_n) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..truth.height() {
        for x in 0..truth.width() {
            let Some(g) = truth.get(x, y) else {
                continue;
            };
            n += 1;
            match estimate.get(x, y) {
                Some(d) => {
                    total += (d - g).abs();
                    valid_sum += (d - g).abs();
                    valid_n += 1;
                }
                None => total += g.abs(),
            }
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("ground truth has no valid pixels".into()));
    }
    Ok(DepthMetrics {
        mean_error: total / n as f64,
        valid_mean_error: if valid_n > 0 { valid_sum / valid_n as f64 } else { 0.0 },
        density: 100.0 * valid_n as f64 / n as f64,
        ground_truth_pixels: n,
    })
}
