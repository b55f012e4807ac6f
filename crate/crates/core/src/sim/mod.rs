//! Synthetic event-camera rig: scenes, trajectories, rendering, events and IMU.

pub mod event_gen;
pub mod imu;
pub mod render;
pub mod scene;
pub mod trajectory;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::dataset::{Dataset, Frame, StampedPose};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::par::Exec;

pub use event_gen::{generate_events, EventSimOptions};
pub use imu::{simulate_imu, standard_gravity, ImuNoise, ImuSample};
pub use render::{ground_truth_depth, render_intensity};
pub use scene::{SceneModel, Texture};
pub use trajectory::{AnalyticTrajectory, Channel, Trajectory};

/// 160×120 pinhole sensor used by the bundled sequences.
pub fn default_camera() -> CameraModel {
    CameraModel::new(140.0, 140.0, 79.5, 59.5, 160, 120).expect("valid default camera")
}

/// `T_b_e` for a forward-looking camera on a forward-left-up body.
pub fn default_extrinsic() -> Pose {
    let r = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    Pose::new(
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)),
        Vec3::new(0.03, 0.0, 0.02),
    )
}

/// Everything needed to synthesise a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRig {
    pub scene: SceneModel,
    pub trajectory: AnalyticTrajectory,
    pub camera: CameraModel,
    pub extrinsic: Pose,
    pub events: EventSimOptions,
    pub frame_rate: f64,
    /// Sub-pixel rays per axis when rendering intensity frames.
    pub frame_supersample: usize,
    pub imu_rate: f64,
    pub imu_noise: ImuNoise,
    pub groundtruth_rate: f64,
}

impl SyntheticRig {
    pub fn new(scene: SceneModel, trajectory: AnalyticTrajectory) -> Self {
        Self {
            scene,
            trajectory,
            camera: default_camera(),
            extrinsic: default_extrinsic(),
            events: EventSimOptions::default(),
            frame_rate: 20.0,
            frame_supersample: 3,
            imu_rate: 200.0,
            imu_noise: ImuNoise::default(),
            groundtruth_rate: 100.0,
        }
    }

    /// Camera pose `T_w_e(t)`.
    pub fn camera_pose(&self, t: f64) -> Pose {
        self.trajectory.pose(t) * self.extrinsic
    }

    pub fn generate(&self, exec: Exec) -> Result<Dataset> {
        if !(self.frame_rate > 0.0 && self.groundtruth_rate > 0.0) {
            return Err(Error::param("frame and ground-truth rates must be positive"));
        }
        let duration = self.trajectory.duration;
        let events = generate_events(&self.scene, &self.trajectory, &self.extrinsic, &self.camera, &self.events, exec)?;
        let rays = render::RayTable::new(&self.camera, self.frame_supersample);
        let frames = sample_times(duration, self.frame_rate)
            .into_iter()
            .map(|t| Frame {
                t,
                image: render::render_with_rays(&self.scene, &self.camera_pose(t), &self.camera, &rays, exec).0,
            })
            .collect();
        let imu = simulate_imu(&self.trajectory, self.imu_rate, &standard_gravity(), &self.imu_noise)?;
        let groundtruth = sample_times(duration, self.groundtruth_rate)
            .into_iter()
            .map(|t| StampedPose {
                t,
                pose: self.trajectory.pose(t),
            })
            .collect();
        Ok(Dataset {
            camera: self.camera.clone(),
            extrinsic: self.extrinsic,
            events,
            frames,
            imu,
            groundtruth,
            scene: Some(self.scene.clone()),
        })
    }
}

fn sample_times(duration: f64, rate: f64) -> Vec<f64> {
    let n = (duration * rate + 1e-9).floor() as usize;
    (0..=n).map(|k| k as f64 / rate).collect()
}

/// Hand-held style motion in front of the checkerboard wall.
pub fn room_sweep(duration: f64) -> AnalyticTrajectory {
    AnalyticTrajectory {
        position: [
            Channel::sine(0.0, 0.35, 0.11, 0.0),
            Channel::sine(0.0, 0.45, 0.13, 0.0),
            Channel::sine(0.0, 0.15, 0.17, 0.0),
        ],
        roll: Channel::sine(0.0, 0.06, 0.19, 0.0),
        pitch: Channel::sine(0.0, 0.08, 0.15, 0.7),
        yaw: Channel::sine(0.0, 0.22, 0.12, 0.3),
        duration,
    }
}

/// Sideways sweep along world y with a slight vertical bob, facing +x.
pub fn lateral_sweep(span: f64, duration: f64) -> AnalyticTrajectory {
    AnalyticTrajectory {
        position: [
            Channel::constant(0.0),
            Channel::linear(-0.5 * span, span / duration),
            Channel::sine(0.0, 0.1 * span, 0.5 / duration, 0.0),
        ],
        roll: Channel::default(),
        pitch: Channel::default(),
        yaw: Channel::default(),
        duration,
    }
}

/// Rotation from the textured front wall (yaw 0) to the striped right wall
/// (yaw −90° at mid-sequence) and back, with a gentle translation.
pub fn stripes_turn(duration: f64) -> AnalyticTrajectory {
    let quarter = std::f64::consts::FRAC_PI_4;
    AnalyticTrajectory {
        position: [
            Channel::sine(0.0, 0.2, 0.13, 0.0),
            Channel::sine(0.0, 0.2, 0.11, 0.0),
            Channel::sine(0.0, 0.1, 0.17, 0.0),
        ],
        roll: Channel::default(),
        pitch: Channel::sine(0.0, 0.05, 0.2, 0.0),
        yaw: Channel::sine(-quarter, quarter, 0.1, std::f64::consts::FRAC_PI_2),
        duration,
    }
}
