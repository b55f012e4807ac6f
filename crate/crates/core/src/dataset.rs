//! In-memory sequences and the on-disk dataset layout.
//!
//! ```text
//! <dir>/camera.txt        flat key = value calibration, incl. T_b_e
//! <dir>/events.txt        t u v p
//! <dir>/images.csv        t,index
//! <dir>/images/<i>.png    8-bit grayscale frames
//! <dir>/imu.csv           t,gx,gy,gz,ax,ay,az
//! <dir>/groundtruth.txt   optional TUM body poses
//! <dir>/scene.json        optional synthetic scene, enables depth evaluation
//! ```

use std::path::Path;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::geometry::Pose;
use crate::image::IntensityImage;
use crate::io;
use crate::sim::imu::ImuSample;
use crate::sim::scene::SceneModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub image: IntensityImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub camera: CameraModel,
    /// `T_b_e`.
    pub extrinsic: Pose,
    pub events: EventStream,
    pub frames: Vec<Frame>,
    pub imu: Vec<ImuSample>,
    /// Body poses `T_w_b`.
    pub groundtruth: Vec<StampedPose>,
    pub scene: Option<SceneModel>,
}

impl Dataset {
    pub fn groundtruth_pairs(&self) -> Vec<(f64, Pose)> {
        self.groundtruth.iter().map(|s| (s.t, s.pose)).collect()
    }

    /// Ground-truth body pose at `t` by interpolation, `None` outside the covered span.
    pub fn groundtruth_at(&self, t: f64) -> Option<Pose> {
        interpolate_pose(&self.groundtruth_pairs(), t)
    }

    /// Checks every file of the layout before anything is parsed, then loads it.
    pub fn load(dir: &Path) -> Result<Self> {
        for name in ["camera.txt", "events.txt", "images.csv", "imu.csv"] {
            let p = dir.join(name);
            if !p.is_file() {
                return Err(Error::Dataset(format!("missing {}", p.display())));
            }
        }
        let (camera, extrinsic) = io::read_calibration(&dir.join("camera.txt"))?;
        let events = io::read_events(&dir.join("events.txt"), camera.width, camera.height)?;
        if events.is_empty() {
            return Err(Error::Dataset(format!("{} contains no events", dir.join("events.txt").display())));
        }
        let index = io::read_image_index(&dir.join("images.csv"))?;
        let mut frames = Vec::with_capacity(index.len());
        for (t, i) in index {
            let image = io::read_png_gray(&dir.join("images").join(format!("{i}.png")))?;
            if image.width() != camera.width || image.height() != camera.height {
                return Err(Error::Dataset(format!(
                    "frame {i} is {}x{}, calibration says {}x{}",
                    image.width(),
                    image.height(),
                    camera.width,
                    camera.height
                )));
            }
            frames.push(Frame { t, image });
        }
        let imu = io::read_imu(&dir.join("imu.csv"))?;
        let gt_path = dir.join("groundtruth.txt");
        let groundtruth = if gt_path.is_file() {
            io::read_tum(&gt_path)?
                .into_iter()
                .map(|(t, pose)| StampedPose { t, pose })
                .collect()
        } else {
            Vec::new()
        };
        let scene_path = dir.join("scene.json");
        let scene = if scene_path.is_file() {
            let text = io::read_text(&scene_path)?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", scene_path.display())))?)
        } else {
            None
        };
        Ok(Self {
            camera,
            extrinsic,
            events,
            frames,
            imu,
            groundtruth,
            scene,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_calibration(&dir.join("camera.txt"), &self.camera, &self.extrinsic)?;
        io::write_events(&dir.join("events.txt"), &self.events)?;
        let index: Vec<(f64, usize)> = self.frames.iter().enumerate().map(|(i, f)| (f.t, i)).collect();
        io::write_image_index(&dir.join("images.csv"), &index)?;
        for (i, f) in self.frames.iter().enumerate() {
            io::write_png_gray(
                &dir.join("images").join(format!("{i}.png")),
                f.image.width(),
                f.image.height(),
                f.image.to_u8(),
            )?;
        }
        io::write_imu(&dir.join("imu.csv"), &self.imu)?;
        if !self.groundtruth.is_empty() {
            io::write_tum(&dir.join("groundtruth.txt"), &self.groundtruth_pairs())?;
        }
        if let Some(scene) = &self.scene {
            let text = serde_json::to_string_pretty(scene).map_err(|e| Error::Config(e.to_string()))?;
            io::write_bytes(&dir.join("scene.json"), text.as_bytes())?;
        }
        Ok(())
    }
}

/// Linear/slerp interpolation in a time-sorted pose list.
pub fn interpolate_pose(poses: &[(f64, Pose)], t: f64) -> Option<Pose> {
    let first = poses.first()?;
    let last = poses.last()?;
    if t < first.0 - 1e-9 || t > last.0 + 1e-9 {
        return None;
    }
    let i = poses.partition_point(|p| p.0 <= t);
    if i == 0 {
        return Some(first.1);
    }
    if i >= poses.len() {
        return Some(last.1);
    }
    let (a, b) = (&poses[i - 1], &poses[i]);
    let s = if b.0 > a.0 { (t - a.0) / (b.0 - a.0) } else { 0.0 };
    Some(a.1.interpolate(&b.1, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::par::Exec;
    use crate::sim::{room_sweep, scene::checkerboard_room, SyntheticRig};

    #[test]
    fn save_load_round_trip() {
        let mut rig = SyntheticRig::new(checkerboard_room(false), room_sweep(0.1));
        rig.events.rate = 200.0;
        let d = rig.generate(Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.events.len(), d.events.len());
        assert_eq!(back.frames.len(), d.frames.len());
        assert_eq!(back.imu.len(), d.imu.len());
        assert_eq!(back.scene, d.scene);
        assert!((back.frames[0].image.pixels.at(10, 10) - d.frames[0].image.pixels.at(10, 10)).abs() <= 0.5 / 255.0);
    }

    #[test]
    fn missing_files_fail_before_parsing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn interpolation_bounds() {
        let poses = vec![
            (0.0, Pose::identity()),
            (1.0, Pose::from_translation(Vec3::new(2.0, 0.0, 0.0))),
        ];
        assert!((interpolate_pose(&poses, 0.25).unwrap().translation.x - 0.5).abs() < 1e-12);
        assert!(interpolate_pose(&poses, 1.5).is_none());
    }
}
