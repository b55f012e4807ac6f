//! Pinhole camera with radial-tangential (k1, k2, p1, p2) distortion.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub type Pixel = Vector2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Distortion {
    pub const NONE: Distortion = Distortion {
        k1: 0.0,
        k2: 0.0,
        p1: 0.0,
        p2: 0.0,
    };

    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    /// Distorts normalised image coordinates.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (xd, yd)
    }

    /// Jacobian of [`Distortion::apply`] with respect to `(x, y)`.
    pub fn jacobian(&self, x: f64, y: f64) -> Matrix2<f64> {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let dradial = self.k1 + 2.0 * self.k2 * r2;
        Matrix2::new(
            radial + 2.0 * x * x * dradial + 2.0 * self.p1 * y + 6.0 * self.p2 * x,
            2.0 * x * y * dradial + 2.0 * self.p1 * x + 2.0 * self.p2 * y,
            2.0 * x * y * dradial + 2.0 * self.p1 * x + 2.0 * self.p2 * y,
            radial + 2.0 * y * y * dradial + 6.0 * self.p1 * y + 2.0 * self.p2 * x,
        )
    }

    /// Inverts [`Distortion::apply`] by fixed-point iteration.
    pub fn remove(&self, xd: f64, yd: f64) -> (f64, f64) {
        if self.is_zero() {
            return (xd, yd);
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..50 {
            let r2 = x * x + y * y;
            let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
            let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
            let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
            let nx = (xd - dx) / radial;
            let ny = (yd - dy) / radial;
            let done = (nx - x).abs() < 1e-15 && (ny - y).abs() < 1e-15;
            x = nx;
            y = ny;
            if done {
                break;
            }
        }
        (x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: Distortion,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        Self::with_distortion(fx, fy, cx, cy, Distortion::NONE, width, height)
    }

    pub fn with_distortion(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: Distortion,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            distortion,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::param("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("image size must be non-zero"));
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::param("principal point outside the image"));
        }
        Ok(())
    }

    /// Intrinsics for an image downsampled by `2^level` (pixel centres at integer coordinates).
    pub fn scaled(&self, level: usize) -> CameraModel {
        let s = 0.5f64.powi(level as i32);
        CameraModel {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: (self.cx + 0.5) * s - 0.5,
            cy: (self.cy + 0.5) * s - 0.5,
            distortion: self.distortion,
            width: (self.width >> level).max(1),
            height: (self.height >> level).max(1),
        }
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.x >= 0.0
            && px.y >= 0.0
            && px.x <= (self.width - 1) as f64
            && px.y <= (self.height - 1) as f64
    }

    pub fn contains_with_border(&self, px: &Pixel, border: f64) -> bool {
        px.x >= border
            && px.y >= border
            && px.x <= self.width as f64 - 1.0 - border
            && px.y <= self.height as f64 - 1.0 - border
    }

    /// Full projection including distortion.
    pub fn project(&self, p: &Vec3) -> Result<Pixel> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { z: p.z });
        }
        let (x, y) = self.distortion.apply(p.x / p.z, p.y / p.z);
        Ok(Pixel::new(self.fx * x + self.cx, self.fy * y + self.cy))
    }

    /// Projection ignoring distortion (for undistorted feature coordinates).
    pub fn project_pinhole(&self, p: &Vec3) -> Pixel {
        Pixel::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Jacobian of [`CameraModel::project_pinhole`] with respect to the 3D point.
    pub fn project_pinhole_jacobian(&self, p: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Jacobian of [`CameraModel::project`] with respect to the 3D point.
    pub fn project_jacobian(&self, p: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let (x, y) = (p.x * iz, p.y * iz);
        let dn = Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
        let f = Matrix2::new(self.fx, 0.0, 0.0, self.fy);
        f * self.distortion.jacobian(x, y) * dn
    }

    /// Undistorted normalised coordinates `(x, y)` of a raw pixel.
    pub fn normalize(&self, px: &Pixel) -> (f64, f64) {
        let xd = (px.x - self.cx) / self.fx;
        let yd = (px.y - self.cy) / self.fy;
        self.distortion.remove(xd, yd)
    }

    /// Maps a raw pixel to where an ideal pinhole camera would have imaged it.
    pub fn undistort_pixel(&self, px: &Pixel) -> Pixel {
        let (x, y) = self.normalize(px);
        Pixel::new(self.fx * x + self.cx, self.fy * y + self.cy)
    }

    /// Unit-depth ray through a raw pixel.
    pub fn ray(&self, px: &Pixel) -> Vec3 {
        let (x, y) = self.normalize(px);
        Vec3::new(x, y, 1.0)
    }

    /// Point at depth `1/inverse_depth` along the pixel ray.
    pub fn back_project(&self, px: &Pixel, inverse_depth: f64) -> Result<Vec3> {
        if !(inverse_depth > 0.0) {
            return Err(Error::param("inverse depth must be positive"));
        }
        Ok(self.ray(px) / inverse_depth)
    }

    /// Back-projection for pixels that are already undistorted.
    pub fn back_project_pinhole(&self, px: &Pixel, inverse_depth: f64) -> Vec3 {
        Vec3::new(
            (px.x - self.cx) / self.fx,
            (px.y - self.cy) / self.fy,
            1.0,
        ) / inverse_depth
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distorted_projection_jacobian_matches_finite_differences() {
        let cam = CameraModel::with_distortion(
            200.0,
            190.0,
            120.0,
            90.0,
            Distortion {
                k1: -0.2,
                k2: 0.05,
                p1: 0.003,
                p2: -0.002,
            },
            240,
            180,
        )
        .unwrap();
        let p = Vec3::new(0.3, -0.2, 1.7);
        let j = cam.project_jacobian(&p);
        let h = 1e-6;
        for k in 0..3 {
            let mut d = Vec3::zeros();
            d[k] = h;
            let fd = (cam.project(&(p + d)).unwrap() - cam.project(&(p - d)).unwrap()) / (2.0 * h);
            assert!((fd - j.column(k)).norm() < 1e-5);
        }
    }
    use proptest::prelude::*;

    fn cam() -> CameraModel {
        CameraModel::new(200.0, 200.0, 120.0, 90.0, 240, 180).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let px = cam().project(&Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Pixel::new(120.0, 90.0));
    }

    #[test]
    fn hand_pinhole_arithmetic() {
        let px = cam().project(&Vec3::new(0.5, 0.0, 2.0)).unwrap();
        assert!((px - Pixel::new(170.0, 90.0)).norm() < 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        assert!(matches!(
            cam().project(&Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(cam().project(&Vec3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn back_project_examples() {
        let c = cam();
        let p = c.back_project(&Pixel::new(120.0, 90.0), 0.5).unwrap();
        assert!((p - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        let p = c.back_project(&Pixel::new(320.0, 90.0), 1.0).unwrap();
        assert!((p - Vec3::new(1.0, 0.0, 1.0)).norm() < 1e-12);
        assert!(c.back_project(&Pixel::new(1.0, 1.0), 0.0).is_err());
        assert!(c.back_project(&Pixel::new(1.0, 1.0), -1.0).is_err());
    }

    #[test]
    fn invalid_intrinsics() {
        assert!(CameraModel::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraModel::new(1.0, 1.0, 10.0, 1.0, 4, 4).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_undistorted(u in 0.0f64..239.0, v in 0.0f64..179.0, l in 0.05f64..5.0) {
            let c = cam();
            let px = Pixel::new(u, v);
            let q = c.project(&c.back_project(&px, l).unwrap()).unwrap();
            prop_assert!((q - px).norm() < 1e-6);
        }

        #[test]
        fn round_trip_distorted(u in 20.0f64..220.0, v in 20.0f64..160.0, l in 0.1f64..5.0) {
            let d = Distortion { k1: -0.1, k2: 0.01, p1: 1e-3, p2: -5e-4 };
            let c = CameraModel::with_distortion(200.0, 198.0, 121.0, 89.0, d, 240, 180).unwrap();
            let px = Pixel::new(u, v);
            let q = c.project(&c.back_project(&px, l).unwrap()).unwrap();
            prop_assert!((q - px).norm() < 1e-6);
        }
    }
}
