//! Event-aided visual-inertial odometry.

pub mod corners;
pub mod klt;
pub mod preintegration;
pub mod triangulate;
pub mod factors;
pub mod window;
pub mod tracker;
