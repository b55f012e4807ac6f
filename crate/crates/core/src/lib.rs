//! Monocular event-camera SLAM toolkit.
//!
//! Tracking fuses event-corner and image-feature reprojection, IMU
//! preintegration and direct event-mat alignment in a sliding window.
//! Mapping sweeps events through a disparity space image, completes the
//! semi-dense depth with image guidance and fuses everything into a TSDF.
//! A synthetic event-camera rig generates ground-truth-complete data for
//! every stage.

pub mod camera;
pub mod dataset;
pub mod direct_align;
pub mod error;
pub mod eval;
pub mod events;
pub mod evio;
pub mod geometry;
pub mod image;
pub mod inpaint;
pub mod io;
pub mod mvs;
pub mod par;
pub mod pipeline;
pub mod sim;
pub mod tsdf;

pub use camera::{CameraModel, Distortion, Pixel};
pub use error::{Error, Result};
pub use events::{Event, EventMat, EventStream, Polarity, TimeSurface};
pub use geometry::Pose;
pub use par::Exec;
pub use sim::ImuSample;
