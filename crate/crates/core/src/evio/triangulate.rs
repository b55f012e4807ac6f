//! Feature tracks and multi-view triangulation in the anchor camera frame.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector4};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, Pixel};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    EventCorner,
    ImageCorner,
}

/// A landmark observed across keyframes, parametrised by inverse depth in the
/// camera of its first (anchor) observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub id: u64,
    /// `(keyframe id, undistorted pixel)`, first entry is the anchor.
    pub observations: Vec<(u64, Pixel)>,
    /// `None` until triangulated.
    pub inverse_depth: Option<f64>,
    pub source: FeatureSource,
}

impl FeatureTrack {
    pub fn new(id: u64, keyframe: u64, px: Pixel, source: FeatureSource) -> Self {
        Self {
            id,
            observations: vec![(keyframe, px)],
            inverse_depth: None,
            source,
        }
    }

    pub fn anchor(&self) -> (u64, Pixel) {
        self.observations[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriangulationOptions {
    pub min_baseline: f64,
    pub max_reprojection_error: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self {
            min_baseline: 0.02,
            max_reprojection_error: 3.0,
            min_depth: 0.1,
            max_depth: 50.0,
        }
    }
}

/// Inverse depth of the anchor ray from `(T_w_b, undistorted pixel)` views; the
/// first view is the anchor.
pub fn triangulate_views(views: &[(Pose, Pixel)], camera: &CameraModel, extrinsic: &Pose, opts: &TriangulationOptions) -> Result<f64> {
    if views.len() < 2 {
        return Err(Error::Degenerate("triangulation needs two views".into()));
    }
    let t_w_a = views[0].0 * *extrinsic;
    let rel: Vec<Pose> = views.iter().map(|(p, _)| (*p * *extrinsic).inverse() * t_w_a).collect();
    let baseline = rel.iter().map(|t| t.inverse().translation.norm()).fold(0.0, f64::max);
    if baseline < opts.min_baseline {
        return Err(Error::Degenerate(format!("baseline {baseline:.4} m below {}", opts.min_baseline)));
    }
    let mut a = DMatrix::zeros(2 * views.len(), 4);
    for (i, ((_, px), t)) in views.iter().zip(&rel).enumerate() {
        let ray = camera.back_project_pinhole(px, 1.0);
        let (x, y) = (ray.x, ray.y);
        let r = t.rotation_matrix();
        let tr = t.translation;
        for c in 0..3 {
            a[(2 * i, c)] = x * r[(2, c)] - r[(0, c)];
            a[(2 * i + 1, c)] = y * r[(2, c)] - r[(1, c)];
        }
        a[(2 * i, 3)] = x * tr.z - tr.x;
        a[(2 * i + 1, 3)] = y * tr.z - tr.y;
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Singular("triangulation SVD failed".into()))?;
    let (imin, _) = svd.singular_values.argmin();
    let h = Vector4::from_iterator(vt.row(imin).iter().copied());
    if h[3].abs() < 1e-12 {
        return Err(Error::Degenerate("point at infinity".into()));
    }
    let x_a = Vec3::new(h[0], h[1], h[2]) / h[3];
    for ((_, px), t) in views.iter().zip(&rel) {
        let xc = t.transform_point(&x_a);
        if xc.z <= opts.min_depth || xc.z > opts.max_depth {
            return Err(Error::BehindCamera { z: xc.z });
        }
        let err = (camera.project_pinhole(&xc) - px).norm();
        if err > opts.max_reprojection_error {
            return Err(Error::Degenerate(format!("reprojection error {err:.2} px")));
        }
    }
    Ok(1.0 / x_a.z)
}

/// Triangulates `track` using keyframe body poses looked up by id.
pub fn triangulate(track: &FeatureTrack, poses: &BTreeMap<u64, Pose>, camera: &CameraModel, extrinsic: &Pose, opts: &TriangulationOptions) -> Result<f64> {
    let views: Vec<(Pose, Pixel)> = track
        .observations
        .iter()
        .filter_map(|(kf, px)| poses.get(kf).map(|p| (*p, *px)))
        .collect();
    if views.is_empty() || views[0].1 != track.observations[0].1 {
        return Err(Error::Degenerate("anchor keyframe pose unavailable".into()));
    }
    triangulate_views(&views, camera, extrinsic, opts)
}
