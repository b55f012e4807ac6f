//! Sliding-window state, the hybrid cost and its Levenberg-Marquardt solver,
//! and Schur-complement marginalisation.
//!
//! Each keyframe contributes 15 parameters `[δp, δθ, δv, δbg, δba]`; triangulated
//! landmarks follow as one inverse depth each.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::evio::factors::{event_reprojection_residual, huber_cost, huber_weight, landmark_world, relative_pose_factor};
use crate::evio::preintegration::{imu_residual, retract_state, ImuNoiseModel, ImuPreintegration, KinematicState, Vector15};
use crate::evio::triangulate::{FeatureSource, FeatureTrack};
use crate::geometry::{right_jacobian_inv, so3_log, Pose, Vec3};

pub const STATE_DIM: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    pub t: f64,
    pub state: KinematicState,
}

impl Keyframe {
    pub fn pose(&self) -> Pose {
        Pose::new(self.state.rotation, self.state.position)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuFactor {
    pub from: u64,
    pub to: u64,
    pub preintegration: ImuPreintegration,
}

/// Relative-pose constraint from direct event-mat alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePoseConstraint {
    pub from: u64,
    pub to: u64,
    pub delta_t: Pose,
    pub information: Matrix6<f64>,
}

/// Linearised prior in square-root form: `r(x) = r₀ + J·(x ⊟ x₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrior {
    pub keyframes: Vec<u64>,
    pub linearization: Vec<KinematicState>,
    pub jacobian: DMatrix<f64>,
    pub residual: DVector<f64>,
}

impl MarginalPrior {
    /// `H_p = JᵀJ`.
    pub fn hessian(&self) -> DMatrix<f64> {
        self.jacobian.transpose() * &self.jacobian
    }

    /// Strong pose and velocity prior plus weak bias prior on one keyframe.
    pub fn anchor(kf: &Keyframe, sigmas: &PriorSigmas) -> Self {
        let mut j = DMatrix::zeros(STATE_DIM, STATE_DIM);
        let s = [sigmas.position, sigmas.rotation, sigmas.velocity, sigmas.gyro_bias, sigmas.accel_bias];
        for (b, sigma) in s.iter().enumerate() {
            for i in 0..3 {
                j[(3 * b + i, 3 * b + i)] = 1.0 / sigma;
            }
        }
        Self {
            keyframes: vec![kf.id],
            linearization: vec![kf.state],
            jacobian: j,
            residual: DVector::zeros(STATE_DIM),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSigmas {
    pub position: f64,
    pub rotation: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for PriorSigmas {
    fn default() -> Self {
        Self {
            position: 1e-3,
            rotation: 1e-3,
            velocity: 0.05,
            gyro_bias: 0.01,
            accel_bias: 0.1,
        }
    }
}

/// `x ⊟ x₀` in the error-state layout, with the Jacobian of the rotation block.
fn boxminus(x: &KinematicState, x0: &KinematicState) -> (Vector15, nalgebra::Matrix3<f64>) {
    let dtheta = so3_log(&(x0.rotation.inverse() * x.rotation));
    let mut d = Vector15::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&(x.position - x0.position));
    d.fixed_rows_mut::<3>(3).copy_from(&dtheta);
    d.fixed_rows_mut::<3>(6).copy_from(&(x.velocity - x0.velocity));
    d.fixed_rows_mut::<3>(9).copy_from(&(x.bias_gyro - x0.bias_gyro));
    d.fixed_rows_mut::<3>(12).copy_from(&(x.bias_accel - x0.bias_accel));
    (d, right_jacobian_inv(&dtheta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    pub max_iterations: usize,
    pub huber_delta: f64,
    /// Reprojection noise in pixels.
    pub pixel_sigma: f64,
    /// Reprojection noise of time-surface tracks in pixels.
    pub event_pixel_sigma: f64,
    pub use_relative_pose: bool,
    /// Scales the alignment information.
    pub relative_pose_weight: f64,
    pub initial_damping: f64,
    pub min_inverse_depth: f64,
    /// Folds observations of landmarks anchored at the oldest keyframe into the prior.
    pub marginalize_landmarks: bool,
    pub imu_noise: ImuNoiseModel,
    pub prior: PriorSigmas,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            huber_delta: 1.0,
            pixel_sigma: 1.5,
            event_pixel_sigma: 3.0,
            use_relative_pose: true,
            relative_pose_weight: 1.0,
            initial_damping: 1e-4,
            min_inverse_depth: 0.02,
            marginalize_landmarks: true,
            imu_noise: ImuNoiseModel::default(),
            prior: PriorSigmas::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingWindow {
    pub keyframes: Vec<Keyframe>,
    pub tracks: BTreeMap<u64, FeatureTrack>,
    pub imu_factors: Vec<ImuFactor>,
    pub relative_factors: Vec<RelativePoseConstraint>,
    pub prior: Option<MarginalPrior>,
    pub gravity: Vec3,
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub initial_gradient_norm: f64,
    pub iterations: usize,
    /// Cost after every accepted step.
    pub cost_history: Vec<f64>,
    pub failed: bool,
}

/// One whitened factor: residual and Jacobian blocks keyed by parameter offset.
struct Block {
    residual: DVector<f64>,
    jacobians: Vec<(usize, DMatrix<f64>)>,
}

/// Variable layout of the current window.
struct Layout {
    slot: HashMap<u64, usize>,
    landmarks: Vec<u64>,
    landmark_offset: HashMap<u64, usize>,
    dim: usize,
}

impl SlidingWindow {
    pub fn new(capacity: usize, gravity: Vec3) -> Self {
        Self {
            keyframes: Vec::new(),
            tracks: BTreeMap::new(),
            imu_factors: Vec::new(),
            relative_factors: Vec::new(),
            prior: None,
            gravity,
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.keyframes.len() >= self.capacity
    }

    pub fn keyframe(&self, id: u64) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn latest(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    pub fn poses(&self) -> BTreeMap<u64, Pose> {
        self.keyframes.iter().map(|k| (k.id, k.pose())).collect()
    }

    fn layout(&self) -> Layout {
        let slot: HashMap<u64, usize> = self.keyframes.iter().enumerate().map(|(i, k)| (k.id, i)).collect();
        let mut dim = STATE_DIM * self.keyframes.len();
        let mut landmarks = Vec::new();
        let mut landmark_offset = HashMap::new();
        for (id, t) in &self.tracks {
            if t.inverse_depth.is_some() && t.observations.len() >= 2 && slot.contains_key(&t.observations[0].0) {
                landmarks.push(*id);
                landmark_offset.insert(*id, dim);
                dim += 1;
            }
        }
        Layout {
            slot,
            landmarks,
            landmark_offset,
            dim,
        }
    }

    /// Whitened factor blocks. `only` restricts to factors touching given
    /// keyframe ids or landmarks (used by marginalisation).
    fn blocks(&self, layout: &Layout, camera: &CameraModel, extrinsic: &Pose, opts: &OptimizerOptions, only: Option<(u64, &[u64])>) -> (Vec<Block>, f64) {
        let mut out = Vec::new();
        let mut cost = 0.0;
        let touches_kf = |id: u64| only.is_none_or(|(o, _)| o == id);
        // Huber threshold in whitened units so both feature sources share it.
        let delta = opts.huber_delta / opts.pixel_sigma;

        // Always included so that marginalisation yields a single prior.
        if let Some(prior) = &self.prior {
            let mut dx = DVector::zeros(prior.keyframes.len() * STATE_DIM);
            let mut jac = prior.jacobian.clone();
            for (b, (id, lin)) in prior.keyframes.iter().zip(&prior.linearization).enumerate() {
                let kf = &self.keyframes[layout.slot[id]];
                let (d, jr) = boxminus(&kf.state, lin);
                dx.rows_mut(b * STATE_DIM, STATE_DIM).copy_from(&d);
                let cols = jac.columns(b * STATE_DIM + 3, 3) * jr;
                jac.columns_mut(b * STATE_DIM + 3, 3).copy_from(&cols);
            }
            let r = &prior.residual + &prior.jacobian * dx;
            cost += r.norm_squared();
            let jacobians = prior
                .keyframes
                .iter()
                .enumerate()
                .map(|(b, id)| (layout.slot[id] * STATE_DIM, jac.columns(b * STATE_DIM, STATE_DIM).into_owned()))
                .collect();
            out.push(Block { residual: r, jacobians });
        }

        for f in &self.imu_factors {
            if !(touches_kf(f.from)) {
                continue;
            }
            let (Some(&a), Some(&b)) = (layout.slot.get(&f.from), layout.slot.get(&f.to)) else {
                continue;
            };
            let (r, ji, jj) = imu_residual(&f.preintegration, &self.keyframes[a].state, &self.keyframes[b].state, &self.gravity);
            let info = f.preintegration.information(&opts.imu_noise);
            let l = info.cholesky().map(|c| c.l().transpose()).unwrap_or_else(SMatrix::zeros);
            let rw = l * r;
            cost += rw.norm_squared();
            out.push(Block {
                residual: DVector::from_column_slice(rw.as_slice()),
                jacobians: vec![
                    (a * STATE_DIM, DMatrix::from_column_slice(15, 15, (l * ji).as_slice())),
                    (b * STATE_DIM, DMatrix::from_column_slice(15, 15, (l * jj).as_slice())),
                ],
            });
        }

        if opts.use_relative_pose {
            for f in &self.relative_factors {
                if !(touches_kf(f.from) || touches_kf(f.to)) {
                    continue;
                }
                let (Some(&a), Some(&b)) = (layout.slot.get(&f.from), layout.slot.get(&f.to)) else {
                    continue;
                };
                let info = f.information * opts.relative_pose_weight;
                let Some(chol) = (info + Matrix6::identity() * 1e-12).cholesky() else {
                    continue;
                };
                let l = chol.l().transpose();
                let (r, ji, jk) = relative_pose_factor(&f.delta_t, &self.keyframes[a].pose(), &self.keyframes[b].pose());
                let rw = l * r;
                cost += rw.norm_squared();
                let pad = |j: Matrix6<f64>| {
                    let mut m = DMatrix::zeros(6, STATE_DIM);
                    m.view_mut((0, 0), (6, 6)).copy_from(&(l * j));
                    m
                };
                out.push(Block {
                    residual: DVector::from_column_slice(rw.as_slice()),
                    jacobians: vec![(a * STATE_DIM, pad(ji)), (b * STATE_DIM, pad(jk))],
                });
            }
        }

        for lid in &layout.landmarks {
            let t = &self.tracks[lid];
            let (anchor_id, anchor_px) = t.observations[0];
            if let Some((o, ls)) = only {
                if anchor_id != o || !ls.contains(lid) {
                    continue;
                }
            }
            let sigma = match t.source {
                FeatureSource::EventCorner => opts.event_pixel_sigma,
                FeatureSource::ImageCorner => opts.pixel_sigma,
            };
            let lambda = t.inverse_depth.unwrap_or(0.0);
            let ai = layout.slot[&anchor_id];
            let pose_i = self.keyframes[ai].pose();
            for (kid, px) in &t.observations[1..] {
                let Some(&ki) = layout.slot.get(kid) else {
                    continue;
                };
                let Some(rep) = event_reprojection_residual(&anchor_px, px, lambda, &pose_i, &self.keyframes[ki].pose(), camera, extrinsic) else {
                    continue;
                };
                let e = rep.residual.norm() / sigma;
                cost += huber_cost(e, delta);
                let s = huber_weight(e, delta).sqrt() / sigma;
                let pad = |j: nalgebra::Matrix2x6<f64>| {
                    let mut m = DMatrix::zeros(2, STATE_DIM);
                    m.view_mut((0, 0), (2, 6)).copy_from(&(j * s));
                    m
                };
                out.push(Block {
                    residual: DVector::from_column_slice((rep.residual * s).as_slice()),
                    jacobians: vec![
                        (ai * STATE_DIM, pad(rep.d_anchor)),
                        (ki * STATE_DIM, pad(rep.d_target)),
                        (layout.landmark_offset[lid], DMatrix::from_column_slice(2, 1, (rep.d_inverse_depth * s).as_slice())),
                    ],
                });
            }
        }
        (out, cost)
    }

    /// Total cost at the current estimate.
    pub fn cost(&self, camera: &CameraModel, extrinsic: &Pose, opts: &OptimizerOptions) -> f64 {
        let layout = self.layout();
        self.blocks(&layout, camera, extrinsic, opts, None).1
    }

    fn apply(&self, layout: &Layout, dx: &DVector<f64>, min_inverse_depth: f64) -> Option<SlidingWindow> {
        let mut next = self.clone();
        for (i, kf) in next.keyframes.iter_mut().enumerate() {
            let d = Vector15::from_iterator(dx.rows(i * STATE_DIM, STATE_DIM).iter().copied());
            kf.state = retract_state(&kf.state, &d);
        }
        for lid in &layout.landmarks {
            let t = next.tracks.get_mut(lid).unwrap();
            let l = t.inverse_depth.unwrap() + dx[layout.landmark_offset[lid]];
            if !(l >= min_inverse_depth) {
                return None;
            }
            t.inverse_depth = Some(l);
        }
        Some(next)
    }
}

fn accumulate(blocks: &[Block], dim: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for blk in blocks {
        for (oi, ji) in &blk.jacobians {
            let gi = ji.transpose() * &blk.residual;
            let mut seg = b.rows_mut(*oi, ji.ncols());
            seg += gi;
            for (oj, jj) in &blk.jacobians {
                let hij = ji.transpose() * jj;
                let mut v = h.view_mut((*oi, *oj), (ji.ncols(), jj.ncols()));
                v += hij;
            }
        }
    }
    (h, b)
}

/// Damped Gauss-Newton (Levenberg-Marquardt) over all window states and
/// inverse depths. Only cost-decreasing steps are accepted.
pub fn hybrid_optimize(window: &SlidingWindow, camera: &CameraModel, extrinsic: &Pose, opts: &OptimizerOptions) -> (SlidingWindow, OptimizeReport) {
    let mut report = OptimizeReport::default();
    if window.keyframes.len() < 2 {
        report.failed = window.keyframes.is_empty();
        return (window.clone(), report);
    }
    let mut current = window.clone();
    let mut damping = opts.initial_damping;
    let layout = current.layout();
    let (blocks, mut cost) = current.blocks(&layout, camera, extrinsic, opts, None);
    let (mut h, mut b) = accumulate(&blocks, layout.dim);
    report.initial_cost = cost;
    report.initial_gradient_norm = b.norm();
    report.cost_history.push(cost);
    let mut iterations = 0;
    let mut rejections = 0;
    while iterations < opts.max_iterations && rejections < 8 {
        let mut a = h.clone();
        for i in 0..layout.dim {
            a[(i, i)] += damping * h[(i, i)].max(1e-6) + 1e-9;
        }
        let Some(chol) = a.cholesky() else {
            damping *= 10.0;
            rejections += 1;
            if rejections >= 8 {
                report.failed = true;
            }
            continue;
        };
        let dx = -chol.solve(&b);
        let candidate = current.apply(&layout, &dx, opts.min_inverse_depth);
        let new_cost = candidate.as_ref().map(|c| c.cost(camera, extrinsic, opts));
        match (candidate, new_cost) {
            (Some(c), Some(nc)) if nc <= cost => {
                iterations += 1;
                rejections = 0;
                let converged = (cost - nc) <= 1e-10 * cost.max(1e-12) || dx.norm() < 1e-9;
                current = c;
                cost = nc;
                report.cost_history.push(cost);
                damping = (damping / 3.0).max(1e-9);
                if converged {
                    break;
                }
                let (blocks, _) = current.blocks(&layout, camera, extrinsic, opts, None);
                (h, b) = accumulate(&blocks, layout.dim);
            }
            _ => {
                damping *= 4.0;
                rejections += 1;
            }
        }
    }
    if report.failed {
        report.iterations = 0;
        report.final_cost = report.initial_cost;
        return (window.clone(), report);
    }
    report.iterations = iterations;
    report.final_cost = cost;
    (current, report)
}

/// Marginalises the variables at `marg` out of `(H, b)` by Schur complement.
/// Returns the reduced system over the remaining indices in their original order.
pub fn schur_marginalize(h: &DMatrix<f64>, b: &DVector<f64>, marg: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let n = h.nrows();
    let keep: Vec<usize> = (0..n).filter(|i| !marg.contains(i)).collect();
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| h[(rows[i], cols[j])]);
    let hmm = pick(marg, marg);
    let hmk = pick(marg, &keep);
    let hkk = pick(&keep, &keep);
    let bm = DVector::from_fn(marg.len(), |i, _| b[marg[i]]);
    let bk = DVector::from_fn(keep.len(), |i, _| b[keep[i]]);
    let hmm_sym = (&hmm + hmm.transpose()) * 0.5;
    let eig = hmm_sym.symmetric_eigen();
    let tol = 1e-8 * eig.eigenvalues.amax().max(1.0);
    let inv_vals = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    let hmm_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let hs = &hkk - hmk.transpose() * &hmm_inv * &hmk;
    let bs = bk - hmk.transpose() * &hmm_inv * bm;
    ((&hs + hs.transpose()) * 0.5, bs)
}

/// Removes the oldest keyframe and the landmarks anchored at it, folding all
/// factors that touch them into the window prior. No-op unless the window is full.
pub fn marginalize_oldest(window: &SlidingWindow, camera: &CameraModel, extrinsic: &Pose, opts: &OptimizerOptions) -> SlidingWindow {
    if !window.is_full() || window.keyframes.len() < 2 {
        return window.clone();
    }
    let oldest = window.keyframes[0].id;
    let layout = window.layout();
    let anchored: Vec<u64> = layout
        .landmarks
        .iter()
        .copied()
        .filter(|l| opts.marginalize_landmarks && window.tracks[l].observations[0].0 == oldest)
        .collect();
    let (blocks, _) = window.blocks(&layout, camera, extrinsic, opts, Some((oldest, &anchored)));
    let (h, b) = accumulate(&blocks, layout.dim);

    // Keyframes connected to the marginalised variables (besides the oldest).
    let mut connected: Vec<usize> = Vec::new();
    for blk in &blocks {
        for (o, j) in &blk.jacobians {
            if j.ncols() == STATE_DIM && *o != 0 {
                let s = o / STATE_DIM;
                if !connected.contains(&s) {
                    connected.push(s);
                }
            }
        }
    }
    connected.sort_unstable();
    let mut marg: Vec<usize> = (0..STATE_DIM).collect();
    marg.extend(anchored.iter().map(|l| layout.landmark_offset[l]));
    let mut idx = marg.clone();
    for s in &connected {
        idx.extend(s * STATE_DIM..(s + 1) * STATE_DIM);
    }
    let sub_h = DMatrix::from_fn(idx.len(), idx.len(), |i, j| h[(idx[i], idx[j])]);
    let sub_b = DVector::from_fn(idx.len(), |i, _| b[idx[i]]);
    let local_marg: Vec<usize> = (0..marg.len()).collect();
    let (hp, bp) = schur_marginalize(&sub_h, &sub_b, &local_marg);

    let mut next = window.clone();
    next.prior = if connected.is_empty() {
        None
    } else {
        let eig = hp.clone().symmetric_eigen();
        let tol = 1e-8 * eig.eigenvalues.amax().max(1.0);
        let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > tol).collect();
        let mut j = DMatrix::zeros(keep.len(), hp.nrows());
        let mut r = DVector::zeros(keep.len());
        for (row, &i) in keep.iter().enumerate() {
            let s = eig.eigenvalues[i].sqrt();
            let v = eig.eigenvectors.column(i);
            j.row_mut(row).copy_from(&(v.transpose() * s));
            r[row] = v.dot(&bp) / s;
        }
        Some(MarginalPrior {
            keyframes: connected.iter().map(|&s| window.keyframes[s].id).collect(),
            linearization: connected.iter().map(|&s| window.keyframes[s].state).collect(),
            jacobian: j,
            residual: r,
        })
    };

    let oldest_pose = window.keyframes[0].pose();
    next.keyframes.remove(0);
    next.imu_factors.retain(|f| f.from != oldest && f.to != oldest);
    next.relative_factors.retain(|f| f.from != oldest && f.to != oldest);
    let poses = next.poses();
    next.tracks.retain(|_, t| {
        if t.observations[0].0 != oldest {
            t.observations.retain(|(k, _)| *k != oldest);
            return !t.observations.is_empty();
        }
        let world = t.inverse_depth.map(|l| landmark_world(&t.observations[0].1, l, &oldest_pose, camera, extrinsic));
        t.observations.remove(0);
        t.observations.retain(|(k, _)| poses.contains_key(k));
        if t.observations.is_empty() {
            return false;
        }
        t.inverse_depth = world.and_then(|w| {
            let z = (poses[&t.observations[0].0] * *extrinsic).inverse_transform_point(&w).z;
            (z > 1e-3).then(|| 1.0 / z)
        });
        true
    });
    next
}
