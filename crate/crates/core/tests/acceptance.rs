//! End-to-end acceptance checks on synthetic data. Prints one PASS/FAIL line
//! per criterion and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use evslam_core::camera::{CameraModel, Pixel};
use evslam_core::direct_align::{align_event_mats, template_jacobian, AlignOptions};
use evslam_core::eval::{depth_metrics, evaluate_trajectory, trajectory_length};
use evslam_core::events::{build_event_mat, build_time_surface, EventMat};
use evslam_core::evio::factors::{event_reprojection_residual, relative_pose_factor};
use evslam_core::evio::preintegration::{imu_residual, preintegrate, retract_state, ImuNoiseModel, KinematicState};
use evslam_core::evio::tracker::{run_tracker, InitMode, TrackerOptions};
use evslam_core::geometry::{so3_exp, so3_log, Pose, Vec3};
use evslam_core::image::{gaussian_blur, DepthMap, Grid, ImageF, IntensityImage};
use evslam_core::inpaint::{densify, inpaint_depth, region_grow_segment, InpaintOptions, Provenance};
use evslam_core::mvs::{optical_center, plane_transfer_homography, semi_dense_from_events, transfer_across_planes, MvsOptions, ReferenceView};
use evslam_core::pipeline::{self, PipelineConfig, SceneKind, SimulateOptions};
use evslam_core::sim::{self, scene, simulate_imu, standard_gravity, AnalyticTrajectory, ImuNoise, SyntheticRig, Trajectory};
use evslam_core::tsdf::{point_weight, signed_distance, update_voxel, TsdfGrid, TsdfOptions, TsdfVoxel};
use evslam_core::{Event, EventStream, Exec, Polarity};
use nalgebra::{UnitQuaternion, Vector2, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_pose(rng: &mut ChaCha8Rng, r: f64, t: f64) -> Pose {
    let v = |rng: &mut ChaCha8Rng, s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    let rot = v(rng, r);
    Pose::new(so3_exp(&rot), v(rng, t))
}

fn retract(p: &Pose, d: &Vector6<f64>) -> Pose {
    p.retract(&Vec3::new(d[0], d[1], d[2]), &Vec3::new(d[3], d[4], d[5]))
}

fn rel_err(a: &nalgebra::DMatrix<f64>, fd: &nalgebra::DMatrix<f64>) -> f64 {
    (a - fd).norm() / fd.norm().max(1.0)
}

fn fd_pose<const R: usize>(f: impl Fn(&Pose) -> nalgebra::SVector<f64, R>, p: &Pose) -> nalgebra::DMatrix<f64> {
    let h = 1e-6;
    let mut out = nalgebra::DMatrix::zeros(R, 6);
    for c in 0..6 {
        let mut d = Vector6::zeros();
        d[c] = h;
        out.set_column(c, &((f(&retract(p, &d)) - f(&retract(p, &-d))) / (2.0 * h)));
    }
    out
}

fn dyn_of<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_column_slice(R, C, m.as_slice())
}

// 1. Time surface and event mat against per-pixel replay and brute-force scans.
fn representations() -> Outcome {
    let (w, h) = (160usize, 120usize);
    let mut worst_ts = 0.0f64;
    let mut mat_mismatch = 0usize;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = 0.0;
        let events: Vec<Event> = (0..100_000)
            .map(|_| {
                t += rng.random_range(0.0..2e-5);
                let p = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                Event::new(t, rng.random_range(0..w as u16), rng.random_range(0..h as u16), p)
            })
            .collect();
        let stream = EventStream::new(events.clone(), w, h).unwrap();
        let t_ref = t + rng.random_range(0.0..0.01);
        let eta = rng.random_range(0.01..0.1);
        let ts = build_time_surface(&stream, t_ref, eta).unwrap();
        let mut last: BTreeMap<(u16, u16), (f64, f64)> = BTreeMap::new();
        for e in &events {
            last.insert((e.x, e.y), (e.t, e.polarity.sign()));
        }
        for y in 0..h {
            for x in 0..w {
                let expected = last.get(&(x as u16, y as u16)).map_or(0.0, |(tl, s)| s * (-(t_ref - tl) / eta).exp());
                worst_ts = worst_ts.max((ts.values.at(x, y) - expected).abs());
            }
        }
        let t0 = rng.random_range(0.0..t * 0.9);
        let dt = rng.random_range(1e-3..2e-2);
        let mat = build_event_mat(&stream, t0, dt).unwrap();
        let mut brute = Grid::new(w, h, 0u8);
        for e in &events {
            if e.t >= t0 && e.t <= t0 + dt {
                brute.set(e.x as usize, e.y as usize, EventMat::ON);
            }
        }
        mat_mismatch += brute.data().iter().zip(mat.values.data()).filter(|(a, b)| a != b).count();
    }
    outcome(worst_ts <= 1e-12 && mat_mismatch == 0, format!("max time-surface deviation {worst_ts:.2e}, event-mat mismatches {mat_mismatch}"))
}

fn ring_mat(seed: u64, warp: impl Fn(Pixel) -> Pixel) -> EventMat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rings: Vec<(Pixel, f64)> = (0..45)
        .map(|_| (Pixel::new(rng.random_range(5.0..155.0), rng.random_range(5.0..115.0)), rng.random_range(2.5..7.0)))
        .collect();
    let mut values = Grid::new(160, 120, 0u8);
    for (c, r) in rings {
        let c = warp(c);
        let (x0, x1) = ((c.x - r).floor().max(0.0) as usize, ((c.x + r).ceil() as usize).min(159));
        let (y0, y1) = ((c.y - r).floor().max(0.0) as usize, ((c.y + r).ceil() as usize).min(119));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if (Pixel::new(x as f64, y as f64) - c).norm() < r {
                    values.set(x, y, EventMat::ON);
                }
            }
        }
    }
    EventMat { values, t0: 0.0, dt: 0.01 }
}

// 2. Analytic Jacobians against central differences.
fn jacobians() -> Outcome {
    let cam = sim::default_camera();
    let ext = sim::default_extrinsic();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    let mut counts = [0usize; 4];

    // Photometric template Jacobian.
    let img = gaussian_blur(&ring_mat(9, |p| p).values.map(|&v| v as f64 / 255.0), 1.5, Exec::Sequential);
    while counts[0] < 100 {
        let px = Pixel::new(rng.random_range(15.0..145.0), rng.random_range(15.0..105.0));
        let lambda = rng.random_range(0.2..1.0);
        let (_, j) = template_jacobian(&img, &cam, &px, lambda);
        if j.norm() < 1e-2 {
            continue;
        }
        let p = cam.ray(&px) / lambda;
        let f = |d: &Vector6<f64>| {
            let u = cam.project(&Pose::exp(d).transform_point(&p)).unwrap();
            img.sample_bicubic_grad(u.x, u.y).0
        };
        let hstep = 1e-6;
        let fd = nalgebra::RowVector6::from_fn(|_, k| {
            let mut d = Vector6::zeros();
            d[k] = hstep;
            (f(&d) - f(&-d)) / (2.0 * hstep)
        });
        worst[0] = worst[0].max((j - fd).norm() / fd.norm());
        counts[0] += 1;
    }

    // Relative-pose residual.
    for _ in 0..100 {
        let (d, pi, pk) = (random_pose(&mut rng, 0.5, 0.5), random_pose(&mut rng, 1.0, 1.0), random_pose(&mut rng, 1.0, 1.0));
        let (_, ji, jk) = relative_pose_factor(&d, &pi, &pk);
        let fi = fd_pose(|p| relative_pose_factor(&d, p, &pk).0, &pi);
        let fk = fd_pose(|p| relative_pose_factor(&d, &pi, p).0, &pk);
        worst[1] = worst[1].max(rel_err(&dyn_of(&ji), &fi)).max(rel_err(&dyn_of(&jk), &fk));
        counts[1] += 1;
    }

    // Reprojection residual.
    while counts[2] < 100 {
        let (pi, pk) = (random_pose(&mut rng, 0.2, 0.2), random_pose(&mut rng, 0.2, 0.2));
        let anchor = Pixel::new(rng.random_range(20.0..140.0), rng.random_range(15.0..105.0));
        let lambda = rng.random_range(0.2..1.0);
        let obs = Pixel::new(80.0, 60.0);
        let Some(r) = event_reprojection_residual(&anchor, &obs, lambda, &pi, &pk, &cam, &ext) else {
            continue;
        };
        let res = |a: &Pose, k: &Pose, l: f64| event_reprojection_residual(&anchor, &obs, l, a, k, &cam, &ext).unwrap().residual;
        let fi = fd_pose(|p| res(p, &pk, lambda), &pi);
        let fk = fd_pose(|p| res(&pi, p, lambda), &pk);
        let hl = 1e-7;
        let fl = (res(&pi, &pk, lambda + hl) - res(&pi, &pk, lambda - hl)) / (2.0 * hl);
        worst[2] = worst[2]
            .max(rel_err(&dyn_of(&r.d_anchor), &fi))
            .max(rel_err(&dyn_of(&r.d_target), &fk))
            .max(rel_err(&dyn_of(&r.d_inverse_depth), &dyn_of(&fl)));
        counts[2] += 1;
    }

    // IMU preintegration residual.
    let g = standard_gravity();
    let traj = AnalyticTrajectory::smooth_wobble(1.0);
    let samples = simulate_imu(&traj, 200.0, &g, &ImuNoise::default()).unwrap();
    let pre = preintegrate(&samples[..41], &Vec3::new(0.002, 0.0, -0.001), &Vec3::zeros(), &ImuNoiseModel::default()).unwrap();
    let state = |rng: &mut ChaCha8Rng| KinematicState {
        rotation: so3_exp(&Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))),
        position: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        velocity: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        bias_gyro: Vec3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)),
        bias_accel: Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
    };
    for _ in 0..100 {
        let (si, sj) = (state(&mut rng), state(&mut rng));
        let (_, ji, jj) = imu_residual(&pre, &si, &sj, &g);
        for (analytic, wrt_i) in [(ji, true), (jj, false)] {
            let hstep = 1e-6;
            let mut fd = nalgebra::DMatrix::zeros(15, 15);
            for c in 0..15 {
                let mut d = nalgebra::SVector::<f64, 15>::zeros();
                d[c] = hstep;
                let eval = |d: &nalgebra::SVector<f64, 15>| {
                    if wrt_i {
                        imu_residual(&pre, &retract_state(&si, d), &sj, &g).0
                    } else {
                        imu_residual(&pre, &si, &retract_state(&sj, d), &g).0
                    }
                };
                fd.set_column(c, &((eval(&d) - eval(&-d)) / (2.0 * hstep)));
            }
            worst[3] = worst[3].max(rel_err(&dyn_of(&analytic), &fd));
        }
        counts[3] += 1;
    }
    let pass = worst.iter().all(|w| *w <= 1e-4) && counts.iter().all(|c| *c >= 100);
    outcome(
        pass,
        format!(
            "max relative error photometric {:.1e}, relative-pose {:.1e}, reprojection {:.1e}, IMU {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// 3. Direct alignment on synthetic mat pairs.
fn direct_alignment() -> Outcome {
    let cam = sim::default_camera();
    let ext = sim::default_extrinsic();
    let lambda = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let identity = ring_mat(100, |p| p);
    let id = align_event_mats(&identity, &identity, &Pose::identity(), &cam, &ext, lambda, &AlignOptions::default()).unwrap();
    let identity_ok = id.delta_t.log().norm() < 1e-12;
    let flow = |t: &Pose, px: Pixel| cam.project(&t.transform_point(&cam.back_project(&px, lambda).unwrap())).unwrap();
    let mut worst_rms = 0.0f64;
    let mut sum_rms = 0.0;
    for k in 0..50u64 {
        // Camera motion between the mats, scaled so the largest flow is ≤ 3 px.
        let mut t_c = random_pose(&mut rng, 0.01, 0.03);
        let max_flow = |t: &Pose| {
            [(0.0, 0.0), (159.0, 0.0), (0.0, 119.0), (159.0, 119.0), (79.5, 59.5)]
                .iter()
                .map(|&(x, y)| (flow(t, Pixel::new(x, y)) - Pixel::new(x, y)).norm())
                .fold(0.0, f64::max)
        };
        let m = max_flow(&t_c);
        if m > 3.0 {
            t_c = Pose::exp(&(t_c.log() * (2.9 / m)));
        }
        let reference = ring_mat(200 + k, |p| p);
        let current = ring_mat(200 + k, |p| flow(&t_c, p));
        let r = match align_event_mats(&reference, &current, &Pose::identity(), &cam, &ext, lambda, &AlignOptions::default()) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("pair {k}: {e}")),
        };
        let est = ext.inverse() * r.delta_t * ext;
        let (mut ss, mut n) = (0.0, 0usize);
        for y in 0..120 {
            for x in 0..160 {
                if reference.values.at(x, y) != 0 {
                    let px = Pixel::new(x as f64, y as f64);
                    ss += (flow(&est, px) - flow(&t_c, px)).norm_squared();
                    n += 1;
                }
            }
        }
        let rms = (ss / n as f64).sqrt();
        worst_rms = worst_rms.max(rms);
        sum_rms += rms;
    }
    outcome(
        identity_ok && worst_rms <= 0.2,
        format!("identity pair exact: {identity_ok}; reprojection RMS vs true warp mean {:.3} px, worst {worst_rms:.3} px", sum_rms / 50.0),
    )
}

// 4. Noise-free preintegration against RK4 integration of the true kinematics.
fn imu_oracle() -> Outcome {
    let traj = AnalyticTrajectory::smooth_wobble(4.0);
    let g = standard_gravity();
    let samples = simulate_imu(&traj, 200.0, &g, &ImuNoise::default()).unwrap();
    let rk4 = |t0: f64, t1: f64| {
        // State (q, v, p) driven by the analytic body rates and specific force.
        let deriv = |t: f64, q: &UnitQuaternion<f64>, v: &Vec3| {
            let w = traj.angular_velocity(t);
            let f = traj.pose(t).rotation.inverse() * (traj.acceleration(t) - g);
            let dq = q.quaternion() * nalgebra::Quaternion::new(0.0, w.x, w.y, w.z) * 0.5;
            (dq, q * f + g, *v)
        };
        let steps = 5000;
        let h = (t1 - t0) / steps as f64;
        let start = traj.pose(t0);
        let (mut q, mut v, mut p) = (start.rotation, traj.velocity(t0), start.translation);
        for s in 0..steps {
            let t = t0 + s as f64 * h;
            let add = |q: &UnitQuaternion<f64>, dq: &nalgebra::Quaternion<f64>, k: f64| UnitQuaternion::new_normalize(q.quaternion() + dq * k);
            let (q1, a1, v1) = deriv(t, &q, &v);
            let qa = add(&q, &q1, h / 2.0);
            let (q2, a2, v2) = deriv(t + h / 2.0, &qa, &(v + a1 * h / 2.0));
            let qb = add(&q, &q2, h / 2.0);
            let (q3, a3, v3) = deriv(t + h / 2.0, &qb, &(v + a2 * h / 2.0));
            let qc = add(&q, &q3, h);
            let (q4, a4, v4) = deriv(t + h, &qc, &(v + a3 * h));
            q = UnitQuaternion::new_normalize(q.quaternion() + (q1 + q2 * 2.0 + q3 * 2.0 + q4) * (h / 6.0));
            p += (v1 + v2 * 2.0 + v3 * 2.0 + v4) * (h / 6.0);
            v += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
        }
        (q, p)
    };
    let (mut worst_p, mut worst_r) = (0.0f64, 0.0f64);
    for k in 0..7 {
        let t0 = 0.5 * k as f64;
        let seg: Vec<_> = samples.iter().filter(|m| m.t >= t0 - 1e-9 && m.t <= t0 + 0.5 + 1e-9).copied().collect();
        let pre = preintegrate(&seg, &Vec3::zeros(), &Vec3::zeros(), &ImuNoiseModel::default()).unwrap();
        let a = traj.pose(t0);
        let start = KinematicState {
            rotation: a.rotation,
            position: a.translation,
            velocity: traj.velocity(t0),
            bias_gyro: Vec3::zeros(),
            bias_accel: Vec3::zeros(),
        };
        let end = pre.predict(&start, &g);
        let (q, p) = rk4(t0, t0 + 0.5);
        worst_p = worst_p.max((end.position - p).norm());
        worst_r = worst_r.max(so3_log(&(end.rotation.inverse() * q)).norm());
    }
    outcome(worst_p <= 1e-5 && worst_r <= 1e-5, format!("7 segments of 0.5 s: max position error {worst_p:.2e} m, rotation error {worst_r:.2e} rad"))
}

// 5. Hybrid tracking end-to-end and the hybrid vs feature-only ordering.
fn tracking() -> Outcome {
    let run = |rig: SyntheticRig, opts: &TrackerOptions| {
        let d = rig.generate(Exec::Parallel).unwrap();
        let gt = d.groundtruth_pairs();
        let out = run_tracker(&d, opts, InitMode::GroundTruth).unwrap();
        (evaluate_trajectory(&out.trajectory, &gt).unwrap(), trajectory_length(&gt))
    };
    let sim_opts = |scene| SimulateOptions { scene, duration: 10.0, ..Default::default() };
    let hybrid = TrackerOptions::default();
    let (ate, len) = run(sim_opts(SceneKind::Room).rig(), &hybrid);
    let mut feature_only = TrackerOptions::default();
    feature_only.optimizer.use_relative_pose = false;
    let stripes = sim_opts(SceneKind::Stripes).rig();
    let (ate_h, _) = run(stripes.clone(), &hybrid);
    let (ate_f, _) = run(stripes, &feature_only);
    let pct = 100.0 * ate / len;
    outcome(
        pct <= 1.0 && ate_h <= ate_f,
        format!("room ATE {ate:.4} m = {pct:.2}% of {len:.2} m; low-texture run hybrid {ate_h:.4} m vs feature-only {ate_f:.4} m"),
    )
}

// 6. Closed-form plane transfer vs homography chain vs ray-plane intersection.
fn space_sweep() -> Outcome {
    let cam = sim::default_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = Pose::new(
            so3_exp(&Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3))),
            Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3)),
        );
        let z0 = rng.random_range(1.0..4.0);
        let zi = rng.random_range(0.5..10.0);
        let x0 = Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4));
        let c = optical_center(&t);
        let closed = transfer_across_planes(&x0, z0, zi, &c).unwrap();
        let q = plane_transfer_homography(&t, z0, zi).unwrap() * x0.push(1.0);
        let chain = Vector2::new(q.x / q.z, q.y / q.z);
        let p0 = Vec3::new(x0.x, x0.y, 1.0) * z0;
        let s = (zi - c.z) / (p0.z - c.z);
        let hit = c + (p0 - c) * s;
        let oracle = Vector2::new(hit.x / hit.z, hit.y / hit.z);
        let px = |v: Vector2<f64>| Vector2::new(cam.fx * v.x, cam.fy * v.y);
        worst = worst.max((px(closed) - px(chain)).norm()).max((px(closed) - px(oracle)).norm());
    }
    outcome(worst <= 1e-8, format!("1000 configurations, max deviation {worst:.2e} px"))
}

// 7. Semi-dense depth of a textured plane at 2 m.
fn semi_dense() -> Outcome {
    let mut rig = SyntheticRig::new(scene::textured_wall(2.0, 3.0, 0.12), sim::lateral_sweep(0.3, 1.0));
    rig.events.rate = 1000.0;
    let d = rig.generate(Exec::Parallel).unwrap();
    let poses: Vec<_> = (0..=1000).map(|i| (i as f64 * 1e-3, rig.camera_pose(i as f64 * 1e-3))).collect();
    let rv = ReferenceView { t: 0.5, pose: rig.camera_pose(0.5), image: None };
    let opts = MvsOptions::default();
    let (semi, _) = semi_dense_from_events(&rv, d.events.events(), &poses, &d.camera, &opts, Exec::Parallel).unwrap();
    let truth = sim::ground_truth_depth(&rig.scene, &rv.pose, &d.camera);
    let m = depth_metrics(&semi.depth, &truth).unwrap();
    let spacing = opts.plane_spacing_at(2.0);
    outcome(
        m.valid_mean_error <= spacing && m.density >= 5.0,
        format!("valid-pixel mean error {:.4} m (plane spacing at 2 m {spacing:.4} m), density {:.2}%", m.valid_mean_error, m.density),
    )
}

// 8. Guided inpainting on a two-segment piecewise-planar scene.
fn dense_inpainting() -> Outcome {
    let (w, h) = (160usize, 120usize);
    let split = 90;
    // Inverse depth is affine in pixel coordinates for a plane seen by a pinhole camera.
    let truth_at = |x: usize, y: usize| {
        if x < split {
            1.0 / (0.6 + 0.0012 * x as f64 - 0.0008 * y as f64)
        } else {
            1.0 / (0.35 + 0.0006 * y as f64)
        }
    };
    let image = ImageF::from_fn(w, h, |x, _| if x < split { 0.25 } else { 0.7 });
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut semi = DepthMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            // Edge-like seed lines plus a sprinkle of isolated points.
            if x % 12 == 3 || y % 15 == 7 || rng.random_bool(0.01) {
                semi.depth.set(x, y, truth_at(x, y));
                semi.valid.set(x, y, true);
            }
        }
    }
    let opts = InpaintOptions::default();
    let (dense, _) = densify(&semi, &IntensityImage::new(image.clone()), &opts, Exec::Parallel).unwrap();
    let seg = region_grow_segment(&image, opts.intensity_tolerance, opts.min_segment_px);
    let (raw, _, _) = inpaint_depth(&semi, &image, &seg, opts.eps_radius, opts.min_seed_fraction);
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); seg.count];
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = semi.get(x, y) {
                let b = &mut bounds[seg.label(x, y) as usize];
                *b = (b.0.min(d), b.1.max(d));
            }
        }
    }
    let (mut rel, mut n, mut filled, mut violations) = (0.0, 0usize, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = dense.depth.get(x, y) {
                filled += 1;
                rel += (d - truth_at(x, y)).abs() / truth_at(x, y);
            }
            n += 1;
            if raw.provenance.at(x, y) == Provenance::Inpainted {
                let (lo, hi) = bounds[seg.label(x, y) as usize];
                let d = raw.depth.depth.at(x, y);
                if d < lo - 1e-12 || d > hi + 1e-12 {
                    violations += 1;
                }
            }
        }
    }
    let density = 100.0 * filled as f64 / n as f64;
    let mean_rel = 100.0 * rel / filled.max(1) as f64;
    outcome(
        seg.count == 2 && mean_rel <= 5.0 && filled == n && violations == 0,
        format!("{} segments, mean relative error {mean_rel:.2}%, density {density:.1}%, convex-bound violations {violations}", seg.count),
    )
}

// 9. TSDF unit values, sphere fill and fused plane.
fn tsdf() -> Outcome {
    let eps = 0.01;
    let dt = 4.0 * eps;
    let o = Vec3::zeros();
    let p = Vec3::new(0.0, 0.0, 1.0);
    let mut units = signed_distance(&Vec3::new(0.0, 0.0, 0.5), &p, &o) == 0.5
        && (signed_distance(&Vec3::new(0.0, 0.0, 1.2), &p, &o) + 0.2).abs() < 1e-15
        && signed_distance(&p, &p, &o) == 0.0
        && point_weight(0.0, 2.0, eps) == 0.25
        && point_weight(-dt, 1.0, eps) == 0.0
        && (point_weight(-(eps + dt) / 2.0, 1.0, eps) - 0.5).abs() < 1e-12;
    let v = update_voxel(TsdfVoxel::default(), 0.01, 0.3, 100.0, dt, 0.0);
    let v2 = update_voxel(v, 0.01, 0.3, 100.0, dt, 0.0);
    let full = update_voxel(TsdfVoxel { d: 0.02, w: 100.0, color: 0.0 }, -0.03, 4.0, 100.0, dt, 0.0);
    units &= v.d == 0.01 && v.w == 0.3 && (v2.d - 0.01).abs() < 1e-15 && (v2.w - 0.6).abs() < 1e-15;
    units &= (full.d - (100.0 * 0.02 - 4.0 * 0.03) / 104.0).abs() < 1e-15 && full.w == 100.0;

    let opts = TsdfOptions::default();
    let mut sphere = TsdfGrid::new(&opts).unwrap();
    sphere.fill_sdf(&Vec3::repeat(-0.6), &Vec3::repeat(0.6), |p| p.norm() - 0.5);
    let mesh = sphere.extract_mesh(Exec::Parallel);
    let errs: Vec<f64> = mesh.vertices.iter().map(|v| (v.coords.norm() - 0.5).abs()).collect();
    let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len().max(1) as f64).sqrt();
    let sphere_max = errs.iter().copied().fold(0.0, f64::max);

    let cam = CameraModel::new(140.0, 140.0, 79.5, 59.5, 160, 120).unwrap();
    let mut plane = TsdfGrid::new(&opts).unwrap();
    for k in 0..5 {
        let c = Vec3::new(0.05 * (k as f64 - 2.0), 0.03 * ((k % 2) as f64), 0.1 * k as f64 / 4.0);
        let mut depth = DepthMap::invalid(160, 120);
        depth.depth.data_mut().fill(2.0 - c.z);
        depth.valid.data_mut().fill(true);
        plane.integrate_depth_map(&depth, None, &Pose::from_translation(c), &cam, Exec::Parallel);
    }
    let (mut worst_z, mut columns) = (0.0f64, 0usize);
    for i in -20..20 {
        for j in -20..20 {
            for z in plane.zero_crossings(2, i, j, 150..250) {
                worst_z = worst_z.max((z - 2.0).abs());
                columns += 1;
            }
        }
    }
    let pm = plane.extract_mesh(Exec::Parallel);
    let worst_angle = (0..pm.triangles.len())
        .map(|t| pm.face_normal(t).dot(&-Vec3::z()).clamp(-1.0, 1.0).acos().to_degrees())
        .fold(0.0, f64::max);
    let pass = units && !mesh.is_empty() && rms <= eps / 2.0 && sphere_max <= eps && columns > 0 && worst_z <= eps && !pm.is_empty() && worst_angle <= 2.0;
    outcome(
        pass,
        format!(
            "unit values {}; sphere RMS {rms:.4} m (max {sphere_max:.4}); plane zero-crossing max offset {worst_z:.4} m over {columns} columns, max normal error {worst_angle:.2}°",
            if units { "exact" } else { "MISMATCH" }
        ),
    )
}

// 10. Trajectory and depth metric protocol.
fn metrics() -> Outcome {
    let spiral: Vec<(f64, Pose)> = (0..4000)
        .map(|i| {
            let t = i as f64 * 0.05;
            (t, Pose::new(so3_exp(&Vec3::new(0.0, 0.0, 0.3 * t)), Vec3::new(t.cos(), t.sin(), 0.1 * t)))
        })
        .collect();
    let zero = evaluate_trajectory(&spiral, &spiral).unwrap();
    let offset = Pose::new(so3_exp(&Vec3::new(0.3, -0.2, 1.0)), Vec3::new(2.0, -1.0, 0.5));
    let moved: Vec<_> = spiral.iter().map(|(t, p)| (*t, offset * *p)).collect();
    let invariant = evaluate_trajectory(&moved, &spiral).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let normal = Normal::new(0.0, 0.01).unwrap();
    let noisy: Vec<_> = spiral
        .iter()
        .map(|(t, p)| (*t, Pose::new(p.rotation, p.translation + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))))
        .collect();
    let ratio = evaluate_trajectory(&noisy, &spiral).unwrap() / (3f64.sqrt() * 0.01);
    let mut truth = DepthMap::invalid(2, 1);
    let mut est = DepthMap::invalid(2, 1);
    for (x, d) in [(0, 2.0), (1, 4.0)] {
        truth.depth.set(x, 0, d);
        truth.valid.set(x, 0, true);
    }
    est.depth.set(0, 0, 2.5);
    est.valid.set(0, 0, true);
    let dm = depth_metrics(&est, &truth).unwrap();
    let failed_as_zero = (dm.mean_error - 2.25).abs() < 1e-12;
    outcome(
        zero < 1e-12 && invariant < 1e-9 && (ratio - 1.0).abs() <= 0.1 && failed_as_zero,
        format!("identical {zero:.1e} m, rigidly moved {invariant:.1e} m, noise ratio {ratio:.3}, failed pixels as zero depth: {failed_as_zero}"),
    )
}

fn hash_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if name == "metrics.json" {
            continue;
        }
        let digest = Sha256::digest(std::fs::read(&path).unwrap());
        out.insert(name, digest.iter().map(|b| format!("{b:02x}")).collect());
    }
    out
}

// 11. Two-thread SLAM equals sequential tracking; artifacts are reproducible.
fn determinism() -> Outcome {
    let mut config = PipelineConfig::default();
    config.simulate = SimulateOptions { scene: SceneKind::Room, duration: 2.0, ..Default::default() };
    let dataset = config.simulate.rig().generate(Exec::Parallel).unwrap();
    let (tracked, _) = pipeline::run_tracking(&dataset, &config).unwrap();
    let mut hashes = Vec::new();
    let mut identical = true;
    let mut rvs = 0;
    for _ in 0..2 {
        let (slam, mapping, timings) = pipeline::run_slam(&dataset, &config).unwrap();
        identical &= slam.trajectory == tracked.trajectory && slam.keyframes == tracked.keyframes;
        rvs = mapping.rvs.len();
        let dir = tempfile::tempdir().unwrap();
        pipeline::write_tracking(dir.path(), &slam).unwrap();
        pipeline::write_mapping(dir.path(), &mapping).unwrap();
        let report = pipeline::MetricsReport::new(&dataset, Some(&slam), Some(&mapping), &timings).unwrap();
        pipeline::write_metrics(dir.path(), &report).unwrap();
        hashes.push(hash_dir(dir.path()));
    }
    let same = hashes[0] == hashes[1];
    outcome(
        identical && same && rvs > 0,
        format!("slam trajectory bit-identical to tracking: {identical}; {} artifacts with identical hashes: {same}; {rvs} reference views", hashes[0].len()),
    )
}

fn main() {
    // `cargo test` passes harness flags; only a name filter is honoured.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("representations", Duration::from_secs(1), representations),
        ("jacobians", Duration::from_secs(30), jacobians),
        ("direct alignment", Duration::from_secs(20), direct_alignment),
        ("imu preintegration", Duration::from_secs(5), imu_oracle),
        ("hybrid tracking", Duration::from_secs(300), tracking),
        ("space sweep", Duration::from_secs(5), space_sweep),
        ("semi-dense depth", Duration::from_secs(60), semi_dense),
        ("dense inpainting", Duration::from_secs(60), dense_inpainting),
        ("tsdf and mesh", Duration::from_secs(60), tsdf),
        ("metric protocol", Duration::from_secs(5), metrics),
        ("determinism", Duration::from_secs(300), determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let pass = result.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {:2} {name}: {} [{:.2} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
