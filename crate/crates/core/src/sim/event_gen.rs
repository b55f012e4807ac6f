//! Log-intensity threshold event generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity};
use crate::geometry::Pose;
use crate::par::{self, Exec};
use crate::sim::render::{FrameCaster, RayTable};
use crate::sim::scene::SceneModel;
use crate::sim::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventSimOptions {
    /// Contrast threshold in log-intensity units.
    pub threshold: f64,
    /// Internal render rate in Hz.
    pub rate: f64,
    /// Intensities are clamped to at least this before taking the log.
    pub log_floor: f64,
    /// Standard deviation of Gaussian timestamp jitter in seconds; 0 disables it.
    pub jitter_std: f64,
    pub seed: u64,
    /// Rays per pixel along each axis.
    pub supersample: usize,
}

impl Default for EventSimOptions {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            rate: 1000.0,
            log_floor: 1e-3,
            jitter_std: 0.0,
            seed: 0,
            supersample: 1,
        }
    }
}

/// Per-pixel threshold-crossing integrator.
#[derive(Debug, Clone, Copy)]
pub struct PixelIntegrator {
    reference: f64,
    last: f64,
    last_t: f64,
}

impl PixelIntegrator {
    pub fn new(log_intensity: f64, t: f64) -> Self {
        Self {
            reference: log_intensity,
            last: log_intensity,
            last_t: t,
        }
    }

    /// Advances to a new sample and pushes `(t, polarity)` for every crossing.
    pub fn step(&mut self, log_intensity: f64, t: f64, threshold: f64, out: &mut Vec<(f64, Polarity)>) {
        const SLACK: f64 = 1e-9;
        let (l0, t0) = (self.last, self.last_t);
        let dl = log_intensity - l0;
        let at = |level: f64| {
            if dl.abs() < f64::EPSILON {
                t
            } else {
                t0 + ((level - l0) / dl).clamp(0.0, 1.0) * (t - t0)
            }
        };
        while log_intensity - self.reference >= threshold - SLACK {
            self.reference += threshold;
            out.push((at(self.reference), Polarity::Positive));
        }
        while self.reference - log_intensity >= threshold - SLACK {
            self.reference -= threshold;
            out.push((at(self.reference), Polarity::Negative));
        }
        self.last = log_intensity;
        self.last_t = t;
    }
}

/// Simulates the event stream of a camera mounted at `extrinsic` (`T_b_e`)
/// on a body following `traj`, sampling the scene at `opts.rate`.
pub fn generate_events(
    scene: &SceneModel,
    traj: &dyn Trajectory,
    extrinsic: &Pose,
    camera: &CameraModel,
    opts: &EventSimOptions,
    exec: Exec,
) -> Result<EventStream> {
    if !(opts.threshold > 0.0) {
        return Err(Error::param("event threshold must be positive"));
    }
    if !(opts.rate > 0.0) {
        return Err(Error::param("render rate must be positive"));
    }
    if !(opts.log_floor > 0.0) {
        return Err(Error::param("log-intensity floor must be positive"));
    }
    let duration = traj.duration();
    let steps = (duration * opts.rate).ceil().max(1.0) as usize;
    let times: Vec<f64> = (0..=steps)
        .map(|k| (k as f64 / opts.rate).min(duration))
        .collect();
    let poses: Vec<Pose> = times.iter().map(|&t| traj.pose(t) * *extrinsic).collect();
    let casters: Vec<FrameCaster> = poses.iter().map(|p| FrameCaster::new(scene, p)).collect();
    let rays = RayTable::new(camera, opts.supersample);
    let w = camera.width;
    let log_of = |hit: Option<(f64, f64)>| hit.map_or(0.0, |h| h.0).max(opts.log_floor).ln();
    let jitter = Normal::new(0.0, opts.jitter_std.max(0.0)).map_err(|e| Error::param(e.to_string()))?;

    let rows: Vec<Vec<Event>> = par::map_range(exec, camera.height, |y| {
        let mut states: Vec<PixelIntegrator> = (0..w)
            .map(|x| PixelIntegrator::new(log_of(casters[0].pixel(&rays, y * w + x)), times[0]))
            .collect();
        let mut crossings = Vec::new();
        let mut events = Vec::new();
        for (k, caster) in casters.iter().enumerate().skip(1) {
            for (x, state) in states.iter_mut().enumerate() {
                crossings.clear();
                state.step(log_of(caster.pixel(&rays, y * w + x)), times[k], opts.threshold, &mut crossings);
                events.extend(
                    crossings
                        .iter()
                        .map(|&(t, p)| Event::new(t, x as u16, y as u16, p)),
                );
            }
        }
        if opts.jitter_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for e in &mut events {
                e.t = (e.t + jitter.sample(&mut rng)).clamp(0.0, duration);
            }
        }
        events
    });
    let mut events: Vec<Event> = rows.into_iter().flatten().collect();
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    EventStream::new(events, camera.width, camera.height)
}
