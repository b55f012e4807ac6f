//! Image-guided completion of semi-dense depth.
//!
//! The reference-view intensity image is segmented by region growing, holes
//! are filled inside each segment by a fast-marching weighted interpolation,
//! and the inpainted pixels are smoothed by a bilateral and a non-local means
//! filter. [`colorize`] turns the result into a textured point cloud.

pub mod filter;
pub mod fmm;
pub mod segment;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

pub use filter::{filter_depth, FilterOptions};
pub use fmm::{compute_weight, distance_map, inpaint_depth, DistanceMap, InpaintReport, MarchState};
pub use segment::{region_grow_segment, SegmentationMap};

use crate::camera::{CameraModel, Pixel};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::image::{DepthMap, Grid, IntensityImage};
use crate::mvs::ReferenceView;
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Missing,
    Measured,
    Inpainted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseDepthMap {
    pub depth: DepthMap,
    pub provenance: Grid<Provenance>,
}

impl DenseDepthMap {
    pub fn inpainted_count(&self) -> usize {
        self.provenance.data().iter().filter(|p| **p == Provenance::Inpainted).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintOptions {
    /// Region-growing tolerance on intensities in `[0, 1]`.
    pub intensity_tolerance: f64,
    pub min_segment_px: usize,
    /// Radius of the fill neighbourhood in pixels.
    pub eps_radius: usize,
    /// Segments with fewer seeds than this fraction of their area stay empty.
    pub min_seed_fraction: f64,
    pub filter: bool,
    pub bilateral_sigma_s: f64,
    pub bilateral_range_fraction: f64,
    pub nlm_patch: usize,
    pub nlm_search: usize,
    pub nlm_fraction: f64,
}

impl Default for InpaintOptions {
    fn default() -> Self {
        Self {
            intensity_tolerance: 0.08,
            min_segment_px: 30,
            eps_radius: 7,
            min_seed_fraction: 0.001,
            filter: true,
            bilateral_sigma_s: 3.0,
            bilateral_range_fraction: 0.05,
            nlm_patch: 5,
            nlm_search: 11,
            nlm_fraction: 0.03,
        }
    }
}

impl InpaintOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_tolerance >= 0.0) {
            return Err(Error::param("intensity_tolerance must be non-negative"));
        }
        if self.eps_radius == 0 {
            return Err(Error::param("eps_radius must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.min_seed_fraction) {
            return Err(Error::param("min_seed_fraction must lie in [0, 1]"));
        }
        if self.nlm_patch % 2 == 0 || self.nlm_search % 2 == 0 {
            return Err(Error::param("NLM patch and search sizes must be odd"));
        }
        if !(self.bilateral_sigma_s > 0.0) {
            return Err(Error::param("bilateral_sigma_s must be positive"));
        }
        Ok(())
    }

    pub fn filter_options(&self) -> FilterOptions {
        FilterOptions {
            spatial_sigma: self.bilateral_sigma_s,
            range_fraction: self.bilateral_range_fraction,
            patch: self.nlm_patch,
            search: self.nlm_search,
            nlm_fraction: self.nlm_fraction,
        }
    }
}

/// Segments, inpaints and (optionally) filters one reference view.
pub fn densify(semi: &DepthMap, image: &IntensityImage, opts: &InpaintOptions, exec: Exec) -> Result<(DenseDepthMap, InpaintReport)> {
    opts.validate()?;
    if semi.width() != image.width() || semi.height() != image.height() {
        return Err(Error::param("depth map and image differ in size"));
    }
    let seg = region_grow_segment(&image.pixels, opts.intensity_tolerance, opts.min_segment_px);
    let (mut dense, _, report) = inpaint_depth(semi, &image.pixels, &seg, opts.eps_radius, opts.min_seed_fraction);
    if opts.filter {
        dense = filter_depth(&dense, &opts.filter_options(), exec);
    }
    Ok((dense, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub pixel: (usize, usize),
    /// Position in the reference-view camera frame.
    pub camera: Vec3,
    pub world: Point3<f64>,
    pub intensity: f64,
}

/// Back-projects every valid pixel and attaches its image intensity.
pub fn colorize(dense: &DenseDepthMap, image: &IntensityImage, rv: &ReferenceView, camera: &CameraModel) -> Vec<ColoredPoint> {
    let mut out = Vec::with_capacity(dense.depth.valid_count());
    for y in 0..dense.depth.height() {
        for x in 0..dense.depth.width() {
            let Some(d) = dense.depth.get(x, y) else {
                continue;
            };
            let Ok(p) = camera.back_project(&Pixel::new(x as f64, y as f64), 1.0 / d) else {
                continue;
            };
            out.push(ColoredPoint {
                pixel: (x, y),
                camera: p,
                world: Point3::from(rv.pose.transform_point(&p)),
                intensity: image.pixels.at(x, y),
            });
        }
    }
    out
}

/// Grey PLY colours for a textured cloud.
pub fn to_ply_points(points: &[ColoredPoint]) -> Vec<(Point3<f64>, [u8; 3])> {
    points
        .iter()
        .map(|p| {
            let g = (p.intensity.clamp(0.0, 1.0) * 255.0).round() as u8;
            (p.world, [g, g, g])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{so3_exp, Pose};
    use crate::image::ImageF;

    fn camera() -> CameraModel {
        CameraModel::new(140.0, 140.0, 79.5, 59.5, 160, 120).unwrap()
    }

    fn dense_from(depth: DepthMap) -> DenseDepthMap {
        let provenance = depth.valid.map(|v| if *v { Provenance::Measured } else { Provenance::Missing });
        DenseDepthMap { depth, provenance }
    }

    #[test]
    fn principal_point_back_projects_onto_the_axis() {
        let cam = CameraModel::new(140.0, 140.0, 80.0, 60.0, 160, 120).unwrap();
        let mut d = DepthMap::invalid(160, 120);
        d.depth.set(80, 60, 2.0);
        d.valid.set(80, 60, true);
        let img = IntensityImage::new(ImageF::from_fn(160, 120, |x, y| ((x + y) % 7) as f64 / 7.0));
        let rv = ReferenceView { t: 0.0, pose: Pose::identity(), image: None };
        let cloud = colorize(&dense_from(d), &img, &rv, &cam);
        assert_eq!(cloud.len(), 1);
        assert!((cloud[0].camera - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert_eq!(cloud[0].intensity, img.pixels.at(80, 60));
    }

    #[test]
    fn cloud_round_trips_to_source_pixels() {
        let cam = camera();
        let mut d = DepthMap::invalid(160, 120);
        for y in (0..120).step_by(3) {
            for x in (0..160).step_by(2) {
                d.depth.set(x, y, 0.7 + 0.03 * x as f64 + 0.01 * y as f64);
                d.valid.set(x, y, true);
            }
        }
        let img = IntensityImage::new(ImageF::new(160, 120, 0.5));
        let pose = Pose::new(so3_exp(&Vec3::new(0.1, -0.3, 0.2)), Vec3::new(1.0, 2.0, -0.5));
        let rv = ReferenceView { t: 0.0, pose, image: None };
        let cloud = colorize(&dense_from(d.clone()), &img, &rv, &cam);
        assert_eq!(cloud.len(), d.valid_count());
        for p in &cloud {
            let local = pose.inverse().transform_point(&p.world.coords);
            let px = cam.project(&local).unwrap();
            assert!((px - Pixel::new(p.pixel.0 as f64, p.pixel.1 as f64)).norm() < 1e-6);
        }
    }

    #[test]
    fn densify_fills_a_textured_plane() {
        let (w, h) = (64, 48);
        let img = IntensityImage::new(ImageF::from_fn(w, h, |x, y| if (x / 16 + y / 12) % 2 == 0 { 0.3 } else { 0.7 }));
        let mut semi = DepthMap::invalid(w, h);
        for y in (0..h).step_by(4) {
            for x in (0..w).step_by(4) {
                semi.depth.set(x, y, 2.0);
                semi.valid.set(x, y, true);
            }
        }
        let (dense, report) = densify(&semi, &img, &InpaintOptions::default(), Exec::Parallel).unwrap();
        assert_eq!(report.failed, 0);
        assert_eq!(dense.depth.valid_count(), w * h);
        assert!(dense.depth.depth.data().iter().all(|d| (d - 2.0).abs() < 1e-12));
    }

    #[test]
    fn options_reject_even_patch() {
        let o = InpaintOptions { nlm_patch: 4, ..Default::default() };
        assert!(o.validate().is_err());
    }
}
