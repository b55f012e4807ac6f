//! Frame-rate hybrid tracker.
//!
//! Events, IMU samples and intensity frames are pushed in timestamp order. At
//! every frame event corners are tracked on the time surface and image corners
//! on the intensity frame; keyframes add IMU, reprojection and event-mat
//! relative-pose factors to the sliding window, which is then optimised.

use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, Pixel};
use crate::dataset::Dataset;
use crate::direct_align::{align_event_mats, AlignOptions};
use crate::error::{Error, Result};
use crate::events::{Event, EventMat, TimeSurfaceBuilder};
use crate::evio::corners::{detect_event_corners, detect_image_corners, CornerOptions};
use crate::evio::factors::event_reprojection_residual;
use crate::evio::klt::{track_pyramids, KltOptions, TrackPyramid};
use crate::evio::preintegration::{preintegrate, KinematicState};
use crate::evio::triangulate::{triangulate, FeatureSource, FeatureTrack, TriangulationOptions};
use crate::evio::window::{hybrid_optimize, marginalize_oldest, ImuFactor, Keyframe, MarginalPrior, OptimizerOptions, RelativePoseConstraint, SlidingWindow};
use crate::geometry::{so3_exp, Pose, Vec3};
use crate::image::{gaussian_blur, ImageF};
use crate::par::Exec;
use crate::sim::ImuSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerOptions {
    /// Time-surface decay η in seconds.
    pub time_surface_decay: f64,
    /// Event-mat window Δt in seconds.
    pub event_mat_window: f64,
    /// Gaussian smoothing of the time surface before feature tracking, in pixels (0 disables).
    pub time_surface_blur: f64,
    pub window_size: usize,
    /// Seconds between keyframes.
    pub keyframe_interval: f64,
    pub event_corner_target: usize,
    pub image_corner_target: usize,
    pub use_event_features: bool,
    pub use_image_features: bool,
    /// Observations with a larger reprojection error are dropped after optimisation.
    pub outlier_threshold: f64,
    /// Inverse depth used for alignment before any landmark is triangulated.
    pub default_inverse_depth: f64,
    pub corners: CornerOptions,
    pub klt: KltOptions,
    pub triangulation: TriangulationOptions,
    pub optimizer: OptimizerOptions,
    pub align: AlignOptions,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        Self {
            time_surface_decay: 0.03,
            event_mat_window: 0.01,
            time_surface_blur: 1.0,
            window_size: 10,
            keyframe_interval: 0.1,
            event_corner_target: 50,
            image_corner_target: 50,
            use_event_features: true,
            use_image_features: true,
            outlier_threshold: 3.0,
            default_inverse_depth: 0.4,
            corners: CornerOptions::default(),
            klt: KltOptions::default(),
            triangulation: TriangulationOptions::default(),
            optimizer: OptimizerOptions::default(),
            align: AlignOptions::default(),
        }
    }
}

impl TrackerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.time_surface_decay > 0.0 && self.event_mat_window > 0.0 && self.keyframe_interval > 0.0) {
            return Err(Error::param("decay, event-mat window and keyframe interval must be positive"));
        }
        if self.window_size < 2 {
            return Err(Error::param("window must hold at least two keyframes"));
        }
        if !(self.default_inverse_depth > 0.0) {
            return Err(Error::param("default inverse depth must be positive"));
        }
        Ok(())
    }
}

/// Pose estimate emitted for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEstimate {
    pub t: f64,
    pub pose: Pose,
    pub keyframe: bool,
}

/// Per-keyframe diagnostics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyframeStats {
    pub landmarks: usize,
    pub relative_factor: bool,
    pub optimizer_iterations: usize,
    pub optimizer_failed: bool,
}

struct ActiveFeature {
    track: u64,
    px: Pixel,
}

pub struct Tracker {
    camera: CameraModel,
    extrinsic: Pose,
    opts: TrackerOptions,
    window: SlidingWindow,
    ts: TimeSurfaceBuilder,
    events: Vec<Event>,
    imu: Vec<ImuSample>,
    prev_ts: Option<TrackPyramid>,
    prev_image: Option<TrackPyramid>,
    event_features: Vec<ActiveFeature>,
    image_features: Vec<ActiveFeature>,
    last_mat: Option<EventMat>,
    next_keyframe: u64,
    next_track: u64,
    finalized: Vec<(f64, u64, Pose)>,
    estimates: Vec<FrameEstimate>,
    stats: Vec<KeyframeStats>,
}

impl Tracker {
    /// Creates a tracker bootstrapped with the body state at `t0`.
    pub fn new(camera: CameraModel, extrinsic: Pose, gravity: Vec3, t0: f64, initial: KinematicState, opts: TrackerOptions) -> Result<Self> {
        opts.validate()?;
        let mut window = SlidingWindow::new(opts.window_size, gravity);
        let kf = Keyframe { id: 0, t: t0, state: initial };
        window.prior = Some(MarginalPrior::anchor(&kf, &opts.optimizer.prior));
        window.keyframes.push(kf);
        Ok(Self {
            ts: TimeSurfaceBuilder::new(camera.width, camera.height, opts.time_surface_decay)?,
            camera,
            extrinsic,
            window,
            events: Vec::new(),
            imu: Vec::new(),
            prev_ts: None,
            prev_image: None,
            event_features: Vec::new(),
            image_features: Vec::new(),
            last_mat: None,
            next_keyframe: 1,
            next_track: 0,
            finalized: Vec::new(),
            estimates: Vec::new(),
            stats: Vec::new(),
            opts,
        })
    }

    pub fn push_imu(&mut self, sample: ImuSample) {
        self.imu.push(sample);
    }

    pub fn push_events(&mut self, events: &[Event]) {
        self.ts.ingest(events);
        self.events.extend_from_slice(events);
    }

    pub fn window(&self) -> &SlidingWindow {
        &self.window
    }

    pub fn stats(&self) -> &[KeyframeStats] {
        &self.stats
    }

    /// Keyframe poses that have left the window, `(t, id, T_w_b)`.
    pub fn finalized_keyframes(&self) -> &[(f64, u64, Pose)] {
        &self.finalized
    }

    fn latest(&self) -> &Keyframe {
        self.window.latest().expect("window never empty")
    }

    /// IMU samples spanning `[t0, t1]` with interpolated end points.
    fn imu_span(&self, t0: f64, t1: f64) -> Vec<ImuSample> {
        let interp = |t: f64| -> Option<ImuSample> {
            let i = self.imu.partition_point(|s| s.t < t);
            if i < self.imu.len() && (self.imu[i].t - t).abs() < 1e-9 {
                return Some(ImuSample { t, ..self.imu[i] });
            }
            if i == 0 || i >= self.imu.len() {
                let s = if i == 0 { self.imu.first()? } else { self.imu.last()? };
                return Some(ImuSample { t, ..*s });
            }
            let (a, b) = (&self.imu[i - 1], &self.imu[i]);
            let s = (t - a.t) / (b.t - a.t);
            Some(ImuSample {
                t,
                gyro: a.gyro + (b.gyro - a.gyro) * s,
                accel: a.accel + (b.accel - a.accel) * s,
            })
        };
        let mut out = Vec::new();
        if let Some(a) = interp(t0) {
            out.push(a);
        }
        out.extend(self.imu.iter().filter(|s| s.t > t0 + 1e-9 && s.t < t1 - 1e-9).copied());
        if let Some(b) = interp(t1) {
            out.push(b);
        }
        out
    }

    fn predict(&self, t: f64) -> Result<(KinematicState, Option<crate::evio::preintegration::ImuPreintegration>)> {
        let kf = self.latest();
        if t <= kf.t + 1e-9 {
            return Ok((kf.state, None));
        }
        let span = self.imu_span(kf.t, t);
        if span.len() < 2 {
            return Err(Error::Degenerate(format!("no IMU data between {} and {t}", kf.t)));
        }
        let pre = preintegrate(&span, &kf.state.bias_gyro, &kf.state.bias_accel, &self.opts.optimizer.imu_noise)?;
        Ok((pre.predict(&kf.state, &self.window.gravity), Some(pre)))
    }

    /// Processes the intensity frame at `t`; all events and IMU samples up to `t`
    /// must have been pushed.
    pub fn process_frame(&mut self, t: f64, image: &ImageF) -> Result<FrameEstimate> {
        let ts = self.ts.snapshot(t);
        let mut surface = ts.magnitude();
        if self.opts.time_surface_blur > 0.0 {
            surface = gaussian_blur(&surface, self.opts.time_surface_blur, Exec::Sequential);
        }
        let ts_pyr = TrackPyramid::new(&surface, self.opts.klt.levels);
        let img_pyr = TrackPyramid::new(image, self.opts.klt.levels);
        if self.opts.use_event_features {
            if let Some(prev) = &self.prev_ts {
                self.event_features = advance(prev, &ts_pyr, std::mem::take(&mut self.event_features), &self.opts.klt);
            }
        }
        if self.opts.use_image_features {
            if let Some(prev) = &self.prev_image {
                self.image_features = advance(prev, &img_pyr, std::mem::take(&mut self.image_features), &self.opts.klt);
            }
        }
        self.prune_inactive_tracks();

        let first_frame = self.prev_image.is_none();
        let (predicted, pre) = self.predict(t)?;
        let is_keyframe = first_frame || t - self.latest().t >= self.opts.keyframe_interval - 1e-6;
        let mut pose = Pose::new(predicted.rotation, predicted.position);
        if is_keyframe {
            if !first_frame {
                self.add_keyframe(t, predicted, pre)?;
                pose = self.latest().pose();
            }
            self.last_mat = Some(self.current_mat(t));
            self.detect(&ts, image);
        }
        let horizon = t - 2.0 * self.opts.event_mat_window;
        self.events.retain(|e| e.t >= horizon);
        let keep_from = self.latest().t;
        let cut = self.imu.partition_point(|s| s.t < keep_from).saturating_sub(1);
        self.imu.drain(..cut);

        self.prev_ts = Some(ts_pyr);
        self.prev_image = Some(img_pyr);
        let est = FrameEstimate { t, pose, keyframe: is_keyframe };
        self.estimates.push(est);
        Ok(est)
    }

    fn current_mat(&self, t: f64) -> EventMat {
        let dt = self.opts.event_mat_window;
        EventMat::from_events(self.camera.width, self.camera.height, &self.events, t - dt, dt)
    }

    fn add_keyframe(&mut self, t: f64, predicted: KinematicState, pre: Option<crate::evio::preintegration::ImuPreintegration>) -> Result<()> {
        if self.window.is_full() {
            let oldest = self.window.keyframes[0].clone();
            self.window = marginalize_oldest(&self.window, &self.camera, &self.extrinsic, &self.opts.optimizer);
            self.finalized.push((oldest.t, oldest.id, oldest.pose()));
        }
        let prev = self.latest().clone();
        let id = self.next_keyframe;
        self.next_keyframe += 1;
        self.window.keyframes.push(Keyframe { id, t, state: predicted });
        if let Some(pre) = pre {
            self.window.imu_factors.push(ImuFactor {
                from: prev.id,
                to: id,
                preintegration: pre,
            });
        }
        let mut stats = KeyframeStats::default();

        for f in self.event_features.iter().chain(&self.image_features) {
            if let Some(track) = self.window.tracks.get_mut(&f.track) {
                track.observations.push((id, self.camera.undistort_pixel(&f.px)));
            }
        }

        if self.opts.optimizer.use_relative_pose {
            if let Some(reference) = &self.last_mat {
                let current = self.current_mat(t);
                let init = Pose::new(predicted.rotation, predicted.position).inverse() * prev.pose();
                let lambda = self.median_inverse_depth();
                if let Ok(res) = align_event_mats(reference, &current, &init, &self.camera, &self.extrinsic, lambda, &self.opts.align) {
                    if res.converged && res.information.trace() > 0.0 {
                        self.window.relative_factors.push(RelativePoseConstraint {
                            from: prev.id,
                            to: id,
                            delta_t: res.delta_t,
                            information: res.information,
                        });
                        stats.relative_factor = true;
                    }
                }
            }
        }

        let poses = self.window.poses();
        for track in self.window.tracks.values_mut() {
            if track.inverse_depth.is_none() && track.observations.len() >= 2 {
                track.inverse_depth = triangulate(track, &poses, &self.camera, &self.extrinsic, &self.opts.triangulation).ok();
            }
        }

        let (optimized, report) = hybrid_optimize(&self.window, &self.camera, &self.extrinsic, &self.opts.optimizer);
        stats.optimizer_iterations = report.iterations;
        stats.optimizer_failed = report.failed;
        if !report.failed {
            self.window = optimized;
        }
        self.reject_outliers();
        stats.landmarks = self.window.tracks.values().filter(|t| t.inverse_depth.is_some()).count();
        self.stats.push(stats);
        Ok(())
    }

    fn median_inverse_depth(&self) -> f64 {
        let mut depths: Vec<f64> = self.window.tracks.values().filter_map(|t| t.inverse_depth).collect();
        if depths.is_empty() {
            return self.opts.default_inverse_depth;
        }
        depths.sort_by(f64::total_cmp);
        depths[depths.len() / 2]
    }

    /// Drops landmarks with any observation beyond the outlier threshold.
    fn reject_outliers(&mut self) {
        let poses = self.window.poses();
        let mut bad = Vec::new();
        for (id, t) in &self.window.tracks {
            let Some(lambda) = t.inverse_depth else {
                continue;
            };
            let (aid, apx) = t.observations[0];
            let Some(pi) = poses.get(&aid) else {
                continue;
            };
            let outlier = t.observations[1..].iter().any(|(k, px)| {
                poses.get(k).is_some_and(|pk| {
                    event_reprojection_residual(&apx, px, lambda, pi, pk, &self.camera, &self.extrinsic)
                        .is_none_or(|r| r.residual.norm() > self.opts.outlier_threshold)
                })
            });
            if outlier || lambda < self.opts.optimizer.min_inverse_depth {
                bad.push(*id);
            }
        }
        for id in &bad {
            self.window.tracks.remove(id);
        }
        self.event_features.retain(|f| !bad.contains(&f.track));
        self.image_features.retain(|f| !bad.contains(&f.track));
    }

    /// Forgets tracks whose feature was lost and that carry no usable constraint.
    fn prune_inactive_tracks(&mut self) {
        let active: std::collections::HashSet<u64> = self.event_features.iter().chain(&self.image_features).map(|f| f.track).collect();
        self.window.tracks.retain(|id, t| active.contains(id) || (t.inverse_depth.is_some() && t.observations.len() >= 2));
    }

    fn detect(&mut self, ts: &crate::events::TimeSurface, image: &ImageF) {
        let kf = self.latest().id;
        let existing: Vec<Pixel> = self.event_features.iter().chain(&self.image_features).map(|f| f.px).collect();
        let mut fresh = Vec::new();
        if self.opts.use_event_features && self.event_features.len() < self.opts.event_corner_target {
            let need = self.opts.event_corner_target - self.event_features.len();
            for px in detect_event_corners(ts, &existing, need, &self.opts.corners) {
                fresh.push((px, FeatureSource::EventCorner));
            }
        }
        if self.opts.use_image_features && self.image_features.len() < self.opts.image_corner_target {
            let need = self.opts.image_corner_target - self.image_features.len();
            let mut taken = existing.clone();
            taken.extend(fresh.iter().map(|(p, _)| *p));
            for px in detect_image_corners(image, &taken, need, &self.opts.corners) {
                fresh.push((px, FeatureSource::ImageCorner));
            }
        }
        for (px, source) in fresh {
            let id = self.next_track;
            self.next_track += 1;
            self.window.tracks.insert(id, FeatureTrack::new(id, kf, self.camera.undistort_pixel(&px), source));
            let f = ActiveFeature { track: id, px };
            match source {
                FeatureSource::EventCorner => self.event_features.push(f),
                FeatureSource::ImageCorner => self.image_features.push(f),
            }
        }
    }

    /// Frame estimates with keyframe entries replaced by their latest window estimates.
    pub fn finish(mut self) -> TrackingOutput {
        for kf in &self.window.keyframes {
            self.finalized.push((kf.t, kf.id, kf.pose()));
        }
        let mut trajectory: Vec<(f64, Pose)> = self.estimates.iter().map(|e| (e.t, e.pose)).collect();
        for (t, _, pose) in &self.finalized {
            if let Some(entry) = trajectory.iter_mut().find(|(te, _)| (te - t).abs() < 1e-9) {
                entry.1 = *pose;
            }
        }
        TrackingOutput {
            trajectory,
            keyframes: self.finalized.iter().map(|(t, _, p)| (*t, *p)).collect(),
            stats: self.stats,
        }
    }
}

fn advance(prev: &TrackPyramid, cur: &TrackPyramid, features: Vec<ActiveFeature>, opts: &KltOptions) -> Vec<ActiveFeature> {
    let pts: Vec<Pixel> = features.iter().map(|f| f.px).collect();
    let tracked = track_pyramids(prev, cur, &pts, opts, Exec::Sequential);
    features
        .into_iter()
        .zip(tracked)
        .filter_map(|(f, (px, ok))| ok.then_some(ActiveFeature { track: f.track, px }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackingOutput {
    /// Body pose per processed frame.
    pub trajectory: Vec<(f64, Pose)>,
    /// Final keyframe estimates in time order.
    pub keyframes: Vec<(f64, Pose)>,
    pub stats: Vec<KeyframeStats>,
}

/// Gravity-aligned state from a stationary start: roll and pitch from the mean
/// specific force, zero yaw, velocity and biases.
pub fn static_initialization(samples: &[ImuSample], position: Vec3) -> Result<KinematicState> {
    if samples.is_empty() {
        return Err(Error::Degenerate("no IMU samples for static initialisation".into()));
    }
    let mean = samples.iter().map(|s| s.accel).sum::<Vec3>() / samples.len() as f64;
    if mean.norm() < 1e-6 {
        return Err(Error::Degenerate("zero specific force".into()));
    }
    // Rotation taking the measured up direction (body) onto world z.
    let up = mean.normalize();
    let rotation = nalgebra::UnitQuaternion::rotation_between(&up, &Vec3::z()).unwrap_or_else(|| so3_exp(&Vec3::new(std::f64::consts::PI, 0.0, 0.0)));
    Ok(KinematicState {
        rotation,
        position,
        velocity: Vec3::zeros(),
        bias_gyro: Vec3::zeros(),
        bias_accel: Vec3::zeros(),
    })
}

/// How the first keyframe state is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Pose and velocity from the dataset ground truth.
    #[default]
    GroundTruth,
    /// Stationary start, gravity-levelled from the first 0.1 s of IMU.
    Static,
}

/// Initial state at `t` for the chosen mode.
pub fn initial_state(dataset: &Dataset, t: f64, mode: InitMode) -> Result<KinematicState> {
    match mode {
        InitMode::GroundTruth => {
            let h = 0.01;
            let at = |s: f64| dataset.groundtruth_at(s);
            let pose = at(t).ok_or_else(|| Error::Dataset(format!("no ground truth at t = {t}")))?;
            let (a, b) = match (at(t - h), at(t + h)) {
                (Some(a), Some(b)) => ((a, t - h), (b, t + h)),
                (None, Some(b)) => ((pose, t), (b, t + h)),
                (Some(a), None) => ((a, t - h), (pose, t)),
                (None, None) => ((pose, t), (pose, t + 1.0)),
            };
            Ok(KinematicState {
                rotation: pose.rotation,
                position: pose.translation,
                velocity: (b.0.translation - a.0.translation) / (b.1 - a.1),
                bias_gyro: Vec3::zeros(),
                bias_accel: Vec3::zeros(),
            })
        }
        InitMode::Static => {
            let window: Vec<ImuSample> = dataset.imu.iter().filter(|s| s.t <= t + 0.1).copied().collect();
            static_initialization(&window, Vec3::zeros())
        }
    }
}

/// Streams a dataset through the tracker in timestamp order.
pub fn run_tracker(dataset: &Dataset, opts: &TrackerOptions, init: InitMode) -> Result<TrackingOutput> {
    let first = dataset.frames.first().ok_or_else(|| Error::Dataset("no intensity frames".into()))?;
    let state = initial_state(dataset, first.t, init)?;
    let gravity = crate::sim::standard_gravity();
    let mut tracker = Tracker::new(dataset.camera.clone(), dataset.extrinsic, gravity, first.t, state, opts.clone())?;
    let events = dataset.events.events();
    let (mut ei, mut ii) = (0, 0);
    for frame in &dataset.frames {
        while ii < dataset.imu.len() && dataset.imu[ii].t <= frame.t + 1e-9 {
            tracker.push_imu(dataset.imu[ii]);
            ii += 1;
        }
        let end = dataset.events.upper_bound(frame.t);
        if end > ei {
            tracker.push_events(&events[ei..end]);
            ei = end;
        }
        tracker.process_frame(frame.t, &frame.image.pixels)?;
    }
    Ok(tracker.finish())
}
