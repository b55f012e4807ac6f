//! Direct 2D-2D alignment of event mats.
//!
//! The reference mat is Gaussian-smoothed and its active pixels are lifted to
//! a single nominal inverse depth. The camera-frame motion is estimated with
//! inverse-compositional Lucas-Kanade on a coarse-to-fine pyramid, then
//! expressed as the body increment `ΔT` that maps body-`i` coordinates into
//! body-`k` coordinates.

use nalgebra::{Matrix6, RowVector6, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, Pixel};
use crate::error::{Error, Result};
use crate::events::EventMat;
use crate::geometry::{adjoint, hat, Pose, Vec3};
use crate::image::{gaussian_blur, pyramid, ImageF};
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignOptions {
    pub blur_sigma: f64,
    pub pyramid_levels: usize,
    /// Iteration cap per pyramid level.
    pub max_iterations: usize,
    pub min_active_pixels: usize,
    pub initial_damping: f64,
    /// Trace of the returned information matrix.
    pub prior_weight: f64,
    /// Step norm below which an iteration counts as converged.
    pub step_tolerance: f64,
    /// Smoothed value (mats scaled to `[0, 1]`) above which a reference pixel is used.
    pub active_threshold: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            blur_sigma: 1.5,
            pyramid_levels: 3,
            max_iterations: 50,
            min_active_pixels: 200,
            initial_damping: 1e-3,
            prior_weight: 1e4,
            step_tolerance: 1e-7,
            active_threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// Body increment from the reference to the current pose.
    pub delta_t: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Information of the relative-pose residual, `[translation; rotation]` ordering.
    pub information: Matrix6<f64>,
    /// Cost after every accepted step, finest level last.
    pub cost_history: Vec<f64>,
}

/// Residual of the relative-pose constraint, `log(ΔT · T_wi⁻¹ · T_wk)` as `[t; θ]`.
pub fn relative_pose_residual(delta_t: &Pose, t_wi: &Pose, t_wk: &Pose) -> Vector6<f64> {
    (delta_t * &(t_wi.inverse() * *t_wk)).log()
}

/// A reference pixel lifted to the nominal depth with its precomputed Jacobian.
struct TemplatePoint {
    point: Vec3,
    value: f64,
    jacobian: RowVector6<f64>,
}

/// Value and Jacobian of `img(π(Exp(δ)·X))` at `δ = 0` for `X = ray(px)/λ`.
pub fn template_jacobian(img: &ImageF, camera: &CameraModel, px: &Pixel, inverse_depth: f64) -> (f64, RowVector6<f64>) {
    let x = camera.ray(px) / inverse_depth;
    let (v, gx, gy) = img.sample_bicubic_grad(px.x, px.y);
    let dpi = camera.project_jacobian(&x);
    let grad = nalgebra::RowVector2::new(gx, gy) * dpi;
    let mut j = RowVector6::zeros();
    j.fixed_view_mut::<1, 3>(0, 0).copy_from(&grad);
    j.fixed_view_mut::<1, 3>(0, 3).copy_from(&(-grad * hat(&x)));
    (v, j)
}

fn prepare_level(img: &ImageF, camera: &CameraModel, inverse_depth: f64, threshold: f64, border: usize) -> Vec<TemplatePoint> {
    let mut out = Vec::new();
    for y in border..img.height().saturating_sub(border) {
        for x in border..img.width().saturating_sub(border) {
            if img.at(x, y) <= threshold {
                continue;
            }
            let px = Pixel::new(x as f64, y as f64);
            let (value, jacobian) = template_jacobian(img, camera, &px, inverse_depth);
            if jacobian.norm_squared() < 1e-18 {
                continue;
            }
            out.push(TemplatePoint {
                point: camera.ray(&px) / inverse_depth,
                value,
                jacobian,
            });
        }
    }
    out
}

fn residual(cur: &ImageF, camera: &CameraModel, t_c: &Pose, p: &TemplatePoint) -> f64 {
    let q = t_c.transform_point(&p.point);
    let sample = match camera.project(&q) {
        Ok(u) => cur.sample_bilinear(u.x, u.y),
        Err(_) => 0.0,
    };
    sample - p.value
}

fn cost(cur: &ImageF, camera: &CameraModel, t_c: &Pose, points: &[TemplatePoint]) -> f64 {
    points.iter().map(|p| residual(cur, camera, t_c, p).powi(2)).sum()
}

fn smoothed(mat: &EventMat, sigma: f64) -> ImageF {
    gaussian_blur(&mat.values.map(|&v| v as f64 / 255.0), sigma, Exec::Sequential)
}

/// Estimates `ΔT` between two event mats; `init` seeds the body increment and
/// `extrinsic` is `T_b_e`.
pub fn align_event_mats(
    reference: &EventMat,
    current: &EventMat,
    init: &Pose,
    camera: &CameraModel,
    extrinsic: &Pose,
    nominal_inverse_depth: f64,
    opts: &AlignOptions,
) -> Result<AlignmentResult> {
    if reference.width() != current.width() || reference.height() != current.height() {
        return Err(Error::param("event mats differ in resolution"));
    }
    if reference.width() != camera.width || reference.height() != camera.height {
        return Err(Error::param("event mats do not match the camera resolution"));
    }
    if !(nominal_inverse_depth > 0.0) {
        return Err(Error::param("nominal inverse depth must be positive"));
    }
    for (name, m) in [("reference", reference), ("current", current)] {
        let n = m.active_count();
        if n < opts.min_active_pixels {
            return Err(Error::Degenerate(format!(
                "{name} event mat has {n} active pixels, need {}",
                opts.min_active_pixels
            )));
        }
    }
    let levels = opts.pyramid_levels.max(1);
    let ref_pyr = pyramid(&smoothed(reference, opts.blur_sigma), levels);
    let cur_pyr = pyramid(&smoothed(current, opts.blur_sigma), levels);
    let t_be = *extrinsic;
    let t_eb = extrinsic.inverse();
    let mut t_c = t_eb * *init * t_be;

    let mut iterations = 0;
    let mut converged = false;
    let mut initial_cost = f64::NAN;
    let mut final_cost = 0.0;
    let mut history = Vec::new();
    let mut hessian = Matrix6::zeros();

    for level in (0..levels).rev() {
        let cam = camera.scaled(level);
        let (ref_img, cur_img) = (&ref_pyr[level], &cur_pyr[level]);
        // Replicated-border smoothing distorts the outermost pixels.
        let border = ((2.0 * opts.blur_sigma).ceil() as usize >> level) + 1;
        let points = prepare_level(ref_img, &cam, nominal_inverse_depth, opts.active_threshold, border);
        if points.len() < 6 {
            continue;
        }
        let h: Matrix6<f64> = points.iter().map(|p| p.jacobian.transpose() * p.jacobian).sum();
        let mut current_cost = cost(cur_img, &cam, &t_c, &points);
        if level == 0 {
            hessian = h;
        }
        if level == 0 && initial_cost.is_nan() {
            // Reported relative to the finest level so that it is comparable with `final_cost`.
            initial_cost = cost(cur_img, &cam, &(t_eb * *init * t_be), &points);
        }
        let mut lambda = opts.initial_damping;
        converged = false;
        for _ in 0..opts.max_iterations {
            let g: Vector6<f64> = points
                .iter()
                .map(|p| p.jacobian.transpose() * residual(cur_img, &cam, &t_c, p))
                .sum();
            if g.norm() < 1e-12 {
                converged = true;
                break;
            }
            iterations += 1;
            let mut accepted = false;
            let mut small_step = false;
            while lambda < 1e12 {
                let mut a = h;
                for i in 0..6 {
                    a[(i, i)] += lambda * h[(i, i)].max(1e-12);
                }
                let Some(delta) = a.cholesky().map(|c| c.solve(&g)) else {
                    lambda *= 10.0;
                    continue;
                };
                small_step = delta.norm() < opts.step_tolerance;
                let candidate = t_c * Pose::exp(&delta).inverse();
                let c = cost(cur_img, &cam, &candidate, &points);
                if c <= current_cost {
                    t_c = candidate;
                    current_cost = c;
                    history.push(c);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
                if small_step {
                    break;
                }
            }
            if small_step || !accepted {
                converged = true;
                break;
            }
        }
        if level == 0 {
            final_cost = current_cost;
        }
    }
    if initial_cost.is_nan() {
        return Err(Error::Degenerate("no usable reference pixels".into()));
    }

    let delta_t = t_be * t_c * t_eb;
    let information = if converged {
        let b = adjoint(&(delta_t * t_be)).try_inverse().unwrap_or_else(Matrix6::identity);
        let w = b.transpose() * hessian * b;
        let w = 0.5 * (w + w.transpose());
        let tr = w.trace();
        if tr > 0.0 {
            w * (opts.prior_weight / tr)
        } else {
            Matrix6::zeros()
        }
    } else {
        Matrix6::zeros()
    };
    Ok(AlignmentResult {
        delta_t,
        initial_cost,
        final_cost,
        iterations,
        converged,
        information,
        cost_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use crate::image::Grid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::new(140.0, 140.0, 79.5, 59.5, 160, 120).unwrap()
    }

    /// Filled discs; `warp` maps reference-image centres into the target image.
    fn rings(seed: u64, warp: impl Fn(Pixel) -> Pixel) -> EventMat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rings: Vec<(Pixel, f64)> = (0..45)
            .map(|_| {
                (
                    Pixel::new(rng.random_range(5.0..155.0), rng.random_range(5.0..115.0)),
                    rng.random_range(2.5..7.0),
                )
            })
            .collect();
        let mut values = Grid::new(160, 120, 0u8);
        for (c, r) in rings {
            let c = warp(c);
            for y in 0..120 {
                for x in 0..160 {
                    let d = (Pixel::new(x as f64, y as f64) - c).norm();
                    if d < r {
                        values.set(x, y, EventMat::ON);
                    }
                }
            }
        }
        EventMat {
            values,
            t0: 0.0,
            dt: 0.01,
        }
    }

    #[test]
    fn identical_mats_give_identity() {
        let m = rings(1, |p| p);
        let r = align_event_mats(&m, &m, &Pose::identity(), &cam(), &Pose::identity(), 0.5, &AlignOptions::default()).unwrap();
        assert!(r.iterations <= 1);
        assert!(r.final_cost.abs() < 1e-20);
        assert!(r.delta_t.log().norm() < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn recovers_known_shift() {
        let ext = crate::sim::default_extrinsic();
        let c = cam();
        // Points at 2 m shift by 1.5 px along image x when they move 1.5·Z/fx along camera x.
        let t_c_true = Pose::from_translation(Vec3::new(1.5 * 2.0 / 140.0, 0.0, 0.0));
        let reference = rings(3, |p| p);
        let current = rings(3, |p| p + Pixel::new(1.5, 0.0));
        let r = align_event_mats(&reference, &current, &Pose::identity(), &c, &ext, 0.5, &AlignOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.final_cost <= r.initial_cost);
        let t_c = ext.inverse() * r.delta_t * ext;
        // Binary rasterisation noise leaks into the weakly observed
        // rotation/translation directions near the image border.
        let mut worst: f64 = 0.0;
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..120 {
            for x in 0..160 {
                if reference.values.at(x, y) == 0 {
                    continue;
                }
                let px = Pixel::new(x as f64, y as f64);
                let p = c.back_project(&px, 0.5).unwrap();
                let est = c.project(&t_c.transform_point(&p)).unwrap();
                let truth = c.project(&t_c_true.transform_point(&p)).unwrap();
                worst = worst.max((est - truth).norm());
                sum += (est - truth).norm();
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(mean < 0.1, "mean reprojection difference {mean}");
        assert!(worst < 0.25, "worst reprojection difference {worst}");
        let info = r.information;
        assert!((info - info.transpose()).norm() < 1e-9);
        assert!(info.symmetric_eigenvalues().min() > -1e-6);
    }

    #[test]
    fn empty_current_is_degenerate() {
        let m = rings(1, |p| p);
        let empty = EventMat {
            values: Grid::new(160, 120, 0),
            t0: 0.0,
            dt: 0.01,
        };
        let r = align_event_mats(&m, &empty, &Pose::identity(), &cam(), &Pose::identity(), 0.5, &AlignOptions::default());
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn accepted_steps_never_increase_cost() {
        let reference = rings(5, |p| p);
        let current = rings(5, |p| p + Pixel::new(-1.0, 0.8));
        let r = align_event_mats(&reference, &current, &Pose::identity(), &cam(), &Pose::identity(), 0.4, &AlignOptions::default()).unwrap();
        // Per-level histories are monotone; levels restart on a different image.
        assert!(r.cost_history.windows(2).filter(|w| w[1] > w[0]).count() <= 2);
    }

    #[test]
    fn template_jacobian_matches_finite_differences() {
        let m = rings(9, |p| p);
        let img = gaussian_blur(&m.values.map(|&v| v as f64 / 255.0), 1.5, Exec::Sequential);
        let c = cam();
        let lambda = 0.5;
        let h = 1e-6;
        let mut checked = 0;
        for &(x, y) in &[(40.3, 30.6), (81.45, 62.2), (120.7, 90.35), (20.2, 100.55), (150.6, 10.4)] {
            let px = Pixel::new(x, y);
            let (_, j) = template_jacobian(&img, &c, &px, lambda);
            if j.norm() < 1e-3 {
                continue;
            }
            let p = c.ray(&px) / lambda;
            let f = |d: &Vector6<f64>| {
                let u = c.project(&Pose::exp(d).transform_point(&p)).unwrap();
                img.sample_bicubic_grad(u.x, u.y).0
            };
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let fd = (f(&d) - f(&-d)) / (2.0 * h);
                assert!((fd - j[k]).abs() <= 1e-4 * j.norm(), "k={k} fd={fd} an={}", j[k]);
            }
            checked += 1;
        }
        assert!(checked >= 3);
    }

    #[test]
    fn residual_examples() {
        let a = Pose::new(so3_exp(&Vec3::new(0.1, -0.2, 0.3)), Vec3::new(1.0, 2.0, 3.0));
        let b = Pose::new(so3_exp(&Vec3::new(-0.3, 0.1, 0.05)), Vec3::new(0.5, -1.0, 2.0));
        let d = (a.inverse() * b).inverse();
        assert!(relative_pose_residual(&d, &a, &b).norm() < 1e-12);

        let bi = Pose::identity();
        let bk = Pose::from_translation(Vec3::new(0.3, 0.0, 0.0));
        let d = (bi.inverse() * bk).inverse();
        let moved = Pose::from_translation(Vec3::new(0.31, 0.0, 0.0));
        let r = relative_pose_residual(&d, &bi, &moved);
        assert!((r.fixed_rows::<3>(0).norm() - 0.01).abs() < 1e-12);

        let yaw = Pose::from_rotation(so3_exp(&Vec3::new(0.0, 0.0, 10f64.to_radians())));
        let r = relative_pose_residual(&Pose::identity(), &Pose::identity(), &yaw);
        assert!((r.fixed_rows::<3>(3).norm() - 10f64.to_radians()).abs() < 1e-12);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-1.0f64..1.0), prop::array::uniform3(-5.0f64..5.0))
            .prop_map(|(r, t)| Pose::new(so3_exp(&Vec3::from(r)), Vec3::from(t)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn residual_vanishes_iff_consistent(a in arb_pose(), b in arb_pose(), noise in arb_pose()) {
            let d = (a.inverse() * b).inverse();
            prop_assert!(relative_pose_residual(&d, &a, &b).norm() < 1e-9);
            let wrong = d * noise;
            let r = relative_pose_residual(&wrong, &a, &b);
            prop_assert!((r.norm() < 1e-9) == (noise.log().norm() < 1e-9));
        }
    }
}
