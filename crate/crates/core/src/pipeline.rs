//! End-to-end orchestration: configuration, tracking, mapping, the two-thread
//! SLAM loop, artifact output and evaluation.
//!
//! Mapping consumes keyframe poses only. A reference view (RV) owns the events
//! from its own timestamp up to the next RV, and is processed as soon as that
//! next RV exists, so the result depends only on the sequence of poses pushed
//! and not on thread timing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, DepthMetrics};
use crate::evio::tracker::{initial_state, InitMode, Tracker, TrackerOptions, TrackingOutput};
use crate::geometry::Pose;
use crate::image::DepthMap;
use crate::inpaint::{colorize, densify, to_ply_points, ColoredPoint, DenseDepthMap, InpaintOptions, InpaintReport};
use crate::io;
use crate::mvs::{nearest_frame, semi_dense_from_events, MvsOptions, ReferenceView, SemiDenseDepthMap};
use crate::par::Exec;
use crate::sim::{self, scene, SyntheticRig};
use crate::tsdf::{IntegrationStats, Mesh, TsdfGrid, TsdfOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Checkerboard room, hand-held sweep.
    #[default]
    Room,
    /// Same room with a striped wall the camera turns towards.
    Stripes,
    /// Single textured wall at 2 m, sideways sweep.
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub scene: SceneKind,
    pub duration: f64,
    /// Event sampling rate per pixel in Hz.
    pub event_rate: f64,
    pub frame_supersample: usize,
    pub seed: u64,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            scene: SceneKind::Room,
            duration: 10.0,
            event_rate: 500.0,
            frame_supersample: 3,
            seed: 0,
        }
    }
}

impl SimulateOptions {
    pub fn rig(&self) -> SyntheticRig {
        let mut rig = match self.scene {
            SceneKind::Room => SyntheticRig::new(scene::checkerboard_room(false), sim::room_sweep(self.duration)),
            SceneKind::Stripes => SyntheticRig::new(scene::checkerboard_room(true), sim::stripes_turn(self.duration)),
            SceneKind::Wall => SyntheticRig::new(scene::textured_wall(2.0, 3.0, 0.12), sim::lateral_sweep(0.3 * self.duration, self.duration)),
        };
        rig.events.rate = self.event_rate;
        rig.events.seed = self.seed;
        rig.imu_noise.seed = self.seed;
        rig.frame_supersample = self.frame_supersample;
        rig
    }
}

/// Every tunable of the system. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub init: InitMode,
    /// Run the data-parallel kernels on the thread pool.
    pub parallel: bool,
    /// Capacity of the tracking → mapping keyframe queue.
    pub queue_depth: usize,
    /// RVs whose event window contains a pose gap longer than this are skipped, seconds.
    pub max_pose_gap: f64,
    /// RVs with fewer events are skipped.
    pub min_rv_events: usize,
    /// RVs whose window moves the camera less than this are skipped, metres.
    pub min_rv_baseline: f64,
    pub simulate: SimulateOptions,
    pub tracker: TrackerOptions,
    pub mvs: MvsOptions,
    pub inpaint: InpaintOptions,
    pub tsdf: TsdfOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output: None,
            init: InitMode::GroundTruth,
            parallel: true,
            queue_depth: 64,
            max_pose_gap: 0.5,
            min_rv_events: 500,
            min_rv_baseline: 0.05,
            simulate: SimulateOptions::default(),
            tracker: TrackerOptions::default(),
            mvs: MvsOptions {
                rv_translation: 0.2,
                rv_rotation: 15f64.to_radians(),
                ..MvsOptions::default()
            },
            inpaint: InpaintOptions::default(),
            tsdf: TsdfOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&io::read_text(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.mvs.validate()?;
        self.inpaint.validate()?;
        self.tsdf.validate()?;
        if self.queue_depth == 0 {
            return Err(Error::param("queue_depth must be at least 1"));
        }
        if !(self.max_pose_gap > 0.0) {
            return Err(Error::param("max_pose_gap must be positive"));
        }
        if !(self.min_rv_baseline >= 0.0) {
            return Err(Error::param("min_rv_baseline must be non-negative"));
        }
        if !(self.simulate.duration > 0.0 && self.simulate.event_rate > 0.0) {
            return Err(Error::param("simulation duration and event rate must be positive"));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Mean and standard deviation of a set of durations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingStat {
    pub count: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Per-stage wall-clock samples in milliseconds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Timings(BTreeMap<String, Vec<f64>>);

impl Timings {
    pub fn record(&mut self, stage: &str, since: Instant) {
        self.0.entry(stage.to_string()).or_default().push(since.elapsed().as_secs_f64() * 1e3);
    }

    pub fn merge(&mut self, other: Timings) {
        for (k, v) in other.0 {
            self.0.entry(k).or_default().extend(v);
        }
    }

    pub fn summary(&self) -> BTreeMap<String, TimingStat> {
        self.0
            .iter()
            .map(|(k, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                (k.clone(), TimingStat { count: v.len(), mean_ms: mean, std_ms: var.sqrt() })
            })
            .collect()
    }
}

/// Frames, IMU and events streamed through the tracker in timestamp order.
/// `on_keyframe` sees every keyframe pose once, in time order, as soon as it is final.
fn track_streaming(dataset: &Dataset, config: &PipelineConfig, mut on_keyframe: impl FnMut(f64, Pose)) -> Result<(TrackingOutput, Timings)> {
    let first = dataset.frames.first().ok_or_else(|| Error::Dataset("no intensity frames".into()))?;
    if dataset.events.is_empty() {
        return Err(Error::Dataset("the event stream is empty".into()));
    }
    let state = initial_state(dataset, first.t, config.init)?;
    let mut tracker = Tracker::new(dataset.camera.clone(), dataset.extrinsic, sim::standard_gravity(), first.t, state, config.tracker.clone())?;
    let mut timings = Timings::default();
    let events = dataset.events.events();
    let (mut ei, mut ii, mut published) = (0, 0, 0);
    for frame in &dataset.frames {
        let start = Instant::now();
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
        timings.record("tracking_frame", start);
        for &(t, _, pose) in &tracker.finalized_keyframes()[published..] {
            on_keyframe(t, pose);
        }
        published = tracker.finalized_keyframes().len();
    }
    let out = tracker.finish();
    for &(t, pose) in &out.keyframes[published..] {
        on_keyframe(t, pose);
    }
    Ok((out, timings))
}

pub fn run_tracking(dataset: &Dataset, config: &PipelineConfig) -> Result<(TrackingOutput, Timings)> {
    config.validate()?;
    track_streaming(dataset, config, |_, _| {})
}

/// Products of one reference view.
#[derive(Debug, Clone)]
pub struct RvResult {
    pub index: usize,
    pub rv: ReferenceView,
    pub events: usize,
    pub semi: SemiDenseDepthMap,
    pub dense: DenseDepthMap,
    pub inpaint: InpaintReport,
    pub integration: IntegrationStats,
    pub cloud: Vec<ColoredPoint>,
    pub semi_metrics: Option<DepthMetrics>,
    pub dense_metrics: Option<DepthMetrics>,
}

#[derive(Debug, Clone)]
pub struct MappingOutput {
    pub rvs: Vec<RvResult>,
    /// `(index, reason)` of RVs that produced nothing.
    pub skipped: Vec<(usize, String)>,
    pub grid: TsdfGrid,
    pub mesh: Mesh,
    pub timings: Timings,
}

impl MappingOutput {
    pub fn cloud(&self) -> Vec<ColoredPoint> {
        self.rvs.iter().flat_map(|r| r.cloud.iter().copied()).collect()
    }
}

/// Incremental mapper fed with body keyframe poses in time order.
pub struct Mapper<'a> {
    dataset: &'a Dataset,
    config: &'a PipelineConfig,
    /// Camera poses `T_w_c`.
    poses: Vec<(f64, Pose)>,
    current: Option<(usize, ReferenceView)>,
    grid: TsdfGrid,
    rvs: Vec<RvResult>,
    skipped: Vec<(usize, String)>,
    timings: Timings,
}

impl<'a> Mapper<'a> {
    pub fn new(dataset: &'a Dataset, config: &'a PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            dataset,
            config,
            poses: Vec::new(),
            current: None,
            grid: TsdfGrid::new(&config.tsdf)?,
            rvs: Vec::new(),
            skipped: Vec::new(),
            timings: Timings::default(),
        })
    }

    fn make_rv(&self, t: f64, pose: Pose) -> ReferenceView {
        ReferenceView {
            t,
            pose,
            image: nearest_frame(&self.dataset.frames, t).map(|f| f.image.clone()),
        }
    }

    pub fn push_keyframe(&mut self, t: f64, body: Pose) {
        if self.poses.last().is_some_and(|(last, _)| t <= *last) {
            log::warn!("ignoring out-of-order keyframe at t = {t}");
            return;
        }
        let pose = body * self.dataset.extrinsic;
        self.poses.push((t, pose));
        let Some((k, rv)) = &self.current else {
            self.current = Some((0, self.make_rv(t, pose)));
            return;
        };
        let rel = rv.pose.inverse() * pose;
        if rel.translation.norm() > self.config.mvs.rv_translation || rel.angle() > self.config.mvs.rv_rotation {
            let (k, rv) = (*k, rv.clone());
            self.process(k, rv, t);
            self.current = Some((k + 1, self.make_rv(t, pose)));
        }
    }

    fn process(&mut self, index: usize, rv: ReferenceView, t_end: f64) {
        match self.try_process(index, &rv, t_end) {
            Ok(Some(r)) => self.rvs.push(r),
            Ok(None) => {}
            Err(e) => {
                log::warn!("reference view {index} skipped: {e}");
                self.skipped.push((index, e.to_string()));
            }
        }
    }

    fn try_process(&mut self, index: usize, rv: &ReferenceView, t_end: f64) -> Result<Option<RvResult>> {
        let window: Vec<&(f64, Pose)> = self.poses.iter().filter(|p| p.0 >= rv.t && p.0 <= t_end).collect();
        if let Some(gap) = window.windows(2).map(|w| w[1].0 - w[0].0).reduce(f64::max) {
            if gap > self.config.max_pose_gap {
                return Err(Error::Dataset(format!("pose gap of {gap:.3} s inside the RV window")));
            }
        }
        let c0 = rv.pose.translation;
        let baseline = window.iter().map(|p| (p.1.translation - c0).norm()).fold(0.0, f64::max);
        if baseline < self.config.min_rv_baseline {
            return Err(Error::Dataset(format!("baseline of {baseline:.3} m is too short")));
        }
        let stream = &self.dataset.events;
        let events = &stream.events()[stream.lower_bound(rv.t)..stream.lower_bound(t_end)];
        if events.len() < self.config.min_rv_events {
            return Err(Error::Dataset(format!("only {} events", events.len())));
        }
        let image = rv.image.clone().ok_or_else(|| Error::Dataset("no intensity frame for the RV".into()))?;
        let exec = self.config.exec();
        let camera = &self.dataset.camera;

        let start = Instant::now();
        let (semi, _) = semi_dense_from_events(rv, events, &self.poses, camera, &self.config.mvs, exec)?;
        self.timings.record("mapping_semidense", start);

        let start = Instant::now();
        let (dense, inpaint) = densify(&semi.depth, &image, &self.config.inpaint, exec)?;
        self.timings.record("mapping_inpaint", start);

        let start = Instant::now();
        let integration = self.grid.integrate_depth_map(&dense.depth, Some(&image.pixels), &rv.pose, camera, exec);
        self.timings.record("mapping_tsdf", start);

        let cloud = colorize(&dense, &image, rv, camera);
        let (semi_metrics, dense_metrics) = match &self.dataset.scene {
            Some(scene) => {
                let truth = sim::ground_truth_depth(scene, &rv.pose, camera);
                (eval::depth_metrics(&semi.depth, &truth).ok(), eval::depth_metrics(&dense.depth, &truth).ok())
            }
            None => (None, None),
        };
        Ok(Some(RvResult {
            index,
            rv: rv.clone(),
            events: events.len(),
            semi,
            dense,
            inpaint,
            integration,
            cloud,
            semi_metrics,
            dense_metrics,
        }))
    }

    /// Processes the open RV with the events up to the last pose and meshes the grid.
    pub fn finish(mut self) -> MappingOutput {
        if let (Some((k, rv)), Some(&(t_end, _))) = (self.current.take(), self.poses.last()) {
            if t_end > rv.t {
                self.process(k, rv, t_end);
            }
        }
        let start = Instant::now();
        let mesh = self.grid.extract_mesh(self.config.exec());
        self.timings.record("mapping_mesh", start);
        MappingOutput {
            rvs: self.rvs,
            skipped: self.skipped,
            grid: self.grid,
            mesh,
            timings: self.timings,
        }
    }
}

/// Maps a dataset from body poses `T_w_b` in time order.
pub fn run_mapping(dataset: &Dataset, config: &PipelineConfig, trajectory: &[(f64, Pose)]) -> Result<MappingOutput> {
    let mut mapper = Mapper::new(dataset, config)?;
    for &(t, pose) in trajectory {
        mapper.push_keyframe(t, pose);
    }
    Ok(mapper.finish())
}

/// Tracking and mapping on two threads joined by a bounded keyframe queue.
pub fn run_slam(dataset: &Dataset, config: &PipelineConfig) -> Result<(TrackingOutput, MappingOutput, Timings)> {
    config.validate()?;
    let (tx, rx) = mpsc::sync_channel::<(f64, Pose)>(config.queue_depth);
    std::thread::scope(|s| {
        let mapping = s.spawn(move || -> Result<MappingOutput> {
            let mut mapper = Mapper::new(dataset, config)?;
            for (t, pose) in rx {
                mapper.push_keyframe(t, pose);
            }
            Ok(mapper.finish())
        });
        let tracking = s.spawn(move || {
            let result = track_streaming(dataset, config, |t, pose| {
                // The mapper only disappears if it failed; tracking still completes.
                let _ = tx.send((t, pose));
            });
            drop(tx);
            result
        });
        let tracked = tracking.join().map_err(|_| Error::Degenerate("tracking thread panicked".into()))?;
        let mapped = mapping.join().map_err(|_| Error::Degenerate("mapping thread panicked".into()))?;
        let (tracking, timings) = tracked?;
        Ok((tracking, mapped?, timings))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthSummary {
    /// Mean over RVs of the per-RV mean absolute error, failures as zero depth.
    pub mean_error: f64,
    pub valid_mean_error: f64,
    /// Mean density in percent.
    pub density: f64,
}

fn summarize(metrics: impl Iterator<Item = DepthMetrics>) -> Option<DepthSummary> {
    let v: Vec<DepthMetrics> = metrics.collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    Some(DepthSummary {
        mean_error: v.iter().map(|m| m.mean_error).sum::<f64>() / n,
        valid_mean_error: v.iter().map(|m| m.valid_mean_error).sum::<f64>() / n,
        density: v.iter().map(|m| m.density).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Translation RMSE after rigid alignment, metres.
    pub ate: Option<f64>,
    /// ATE relative to the ground-truth path length, percent.
    pub ate_percent: Option<f64>,
    pub trajectory_length: Option<f64>,
    pub frames: usize,
    pub keyframes: usize,
    pub reference_views: usize,
    pub skipped_reference_views: usize,
    pub semi_dense: Option<DepthSummary>,
    pub dense: Option<DepthSummary>,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
    pub timing: BTreeMap<String, TimingStat>,
}

impl MetricsReport {
    pub fn new(dataset: &Dataset, tracking: Option<&TrackingOutput>, mapping: Option<&MappingOutput>, timings: &Timings) -> Result<Self> {
        let mut r = MetricsReport {
            timing: timings.summary(),
            ..Default::default()
        };
        if let Some(t) = tracking {
            r.frames = t.trajectory.len();
            r.keyframes = t.keyframes.len();
            let gt = dataset.groundtruth_pairs();
            if !gt.is_empty() {
                let ate = eval::evaluate_trajectory(&t.trajectory, &gt)?;
                let len = eval::trajectory_length(&gt);
                r.ate = Some(ate);
                r.trajectory_length = Some(len);
                r.ate_percent = (len > 0.0).then(|| 100.0 * ate / len);
            }
        }
        if let Some(m) = mapping {
            r.reference_views = m.rvs.len();
            r.skipped_reference_views = m.skipped.len();
            r.semi_dense = summarize(m.rvs.iter().filter_map(|x| x.semi_metrics));
            r.dense = summarize(m.rvs.iter().filter_map(|x| x.dense_metrics));
            r.mesh_vertices = m.mesh.vertices.len();
            r.mesh_triangles = m.mesh.triangles.len();
        }
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}

/// Writes the per-frame trajectory and the keyframes (TUM).
pub fn write_tracking(out: &Path, tracking: &TrackingOutput) -> Result<Vec<PathBuf>> {
    let traj = out.join("trajectory.txt");
    let kfs = out.join("keyframes.txt");
    io::write_tum(&traj, &tracking.trajectory)?;
    io::write_tum(&kfs, &tracking.keyframes)?;
    Ok(vec![traj, kfs])
}

/// Writes per-RV depth maps, the textured cloud and the mesh.
pub fn write_mapping(out: &Path, mapping: &MappingOutput) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for r in &mapping.rvs {
        let semi = out.join(format!("rv_{}_semidense.pfm", r.index));
        let dense = out.join(format!("rv_{}_dense.pfm", r.index));
        let mask = out.join(format!("rv_{}_dense_valid.png", r.index));
        io::write_pfm(&semi, &r.semi.depth)?;
        io::write_pfm(&dense, &r.dense.depth)?;
        io::write_mask_png(&mask, &r.dense.depth.valid)?;
        files.extend([semi, dense, mask]);
    }
    let cloud = out.join("cloud.ply");
    io::write_point_cloud_ply(&cloud, &to_ply_points(&mapping.cloud()))?;
    let mesh = out.join("mesh.ply");
    mapping.mesh.write_ply(&mesh)?;
    files.extend([cloud, mesh]);
    Ok(files)
}

pub fn write_metrics(out: &Path, report: &MetricsReport) -> Result<PathBuf> {
    let path = out.join("metrics.json");
    io::write_bytes(&path, report.to_json().as_bytes())?;
    Ok(path)
}

/// Trajectory and optional depth evaluation of stored results.
pub fn evaluate_files(estimate: &Path, groundtruth: &Path, depth: Option<(&Path, &Path)>) -> Result<MetricsReport> {
    let est = io::read_tum(estimate)?;
    let gt = io::read_tum(groundtruth)?;
    let ate = eval::evaluate_trajectory(&est, &gt)?;
    let len = eval::trajectory_length(&gt);
    let mut r = MetricsReport {
        ate: Some(ate),
        trajectory_length: Some(len),
        ate_percent: (len > 0.0).then(|| 100.0 * ate / len),
        frames: est.len(),
        ..Default::default()
    };
    if let Some((e, t)) = depth {
        let m = eval::depth_metrics(&io::read_pfm(e)?, &io::read_pfm(t)?)?;
        r.dense = Some(DepthSummary {
            mean_error: m.mean_error,
            valid_mean_error: m.valid_mean_error,
            density: m.density,
        });
    }
    Ok(r)
}

/// Ground-truth depth of an RV as a [`DepthMap`], for external evaluation.
pub fn ground_truth_rv_depth(dataset: &Dataset, rv: &ReferenceView) -> Option<DepthMap> {
    dataset.scene.as_ref().map(|s| sim::ground_truth_depth(s, &rv.pose, &dataset.camera))
}
