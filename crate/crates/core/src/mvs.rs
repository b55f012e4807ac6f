//! Event-based space sweep: reference views, disparity space image (DSI)
//! voting and semi-dense depth extraction.
//!
//! Geometry is expressed in normalised camera coordinates. A point `x` on the
//! plane `Z = Z_i` of the reference view (RV) is the 3D point `Z_i·(x, y, 1)`.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::dataset::{interpolate_pose, Frame};
use crate::error::{Error, Result};
use crate::events::Event;
use crate::geometry::{Pose, Vec3};
use crate::image::{DepthMap, ImageF, IntensityImage};
use crate::par::{map_chunks, Exec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvsOptions {
    pub num_planes: usize,
    /// Nearest depth plane in metres.
    pub min_depth: f64,
    /// Farthest depth plane in metres.
    pub max_depth: f64,
    /// Camera translation that triggers a new reference view, metres.
    pub rv_translation: f64,
    /// Camera rotation that triggers a new reference view, radians.
    pub rv_rotation: f64,
    pub min_votes: f64,
    /// Half-size of the 3D local-maximum neighbourhood in voxels.
    pub nms_radius: usize,
    /// Required ratio of the column maximum to the column mean.
    pub peak_ratio: f64,
    /// Peaks below this fraction of the 99th-percentile peak are dropped (0 disables).
    pub relative_confidence: f64,
}

impl Default for MvsOptions {
    fn default() -> Self {
        Self {
            num_planes: 100,
            min_depth: 0.5,
            max_depth: 10.0,
            rv_translation: 0.05,
            rv_rotation: 5f64.to_radians(),
            min_votes: 5.0,
            nms_radius: 1,
            peak_ratio: 2.0,
            relative_confidence: 0.35,
        }
    }
}

impl MvsOptions {
    pub fn validate(&self) -> Result<()> {
        if self.num_planes < 3 {
            return Err(Error::param("the DSI needs at least 3 depth planes"));
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(Error::param(format!("invalid depth range [{}, {}]", self.min_depth, self.max_depth)));
        }
        if !(self.rv_translation > 0.0 && self.rv_rotation > 0.0) {
            return Err(Error::param("reference-view thresholds must be positive"));
        }
        Ok(())
    }

    /// Depth planes sampled uniformly in inverse depth, increasing in depth.
    pub fn depth_planes(&self) -> Vec<f64> {
        let (a, b) = (1.0 / self.min_depth, 1.0 / self.max_depth);
        let n = self.num_planes;
        (0..n).map(|i| 1.0 / (a + (b - a) * i as f64 / (n - 1) as f64)).collect()
    }

    /// Depth difference between the two planes around `depth`.
    pub fn plane_spacing_at(&self, depth: f64) -> f64 {
        let step = (1.0 / self.min_depth - 1.0 / self.max_depth) / (self.num_planes - 1) as f64;
        depth * depth * step
    }
}

/// Camera pose, time and intensity frame anchoring one local depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceView {
    pub t: f64,
    /// `T_w_c` of the event camera.
    pub pose: Pose,
    pub image: Option<IntensityImage>,
}

/// Emits a new reference view at the first pose after `last` whose translation
/// or rotation relative to it exceeds the thresholds.
///
/// `poses` are time-ordered camera poses; the nearest frame is attached.
pub fn select_reference_view(poses: &[(f64, Pose)], last: &ReferenceView, frames: &[Frame], opts: &MvsOptions) -> Option<ReferenceView> {
    let start = poses.partition_point(|(t, _)| *t <= last.t);
    poses[start..].iter().find_map(|(t, pose)| {
        let rel = last.pose.inverse() * *pose;
        (rel.translation.norm() > opts.rv_translation || rel.angle() > opts.rv_rotation).then(|| ReferenceView {
            t: *t,
            pose: *pose,
            image: nearest_frame(frames, *t).map(|f| f.image.clone()),
        })
    })
}

pub fn nearest_frame(frames: &[Frame], t: f64) -> Option<&Frame> {
    frames.iter().min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
}

/// Splits a camera trajectory into reference views.
pub fn reference_views(poses: &[(f64, Pose)], frames: &[Frame], opts: &MvsOptions) -> Vec<ReferenceView> {
    let Some(&(t0, p0)) = poses.first() else {
        return Vec::new();
    };
    let mut out = vec![ReferenceView {
        t: t0,
        pose: p0,
        image: nearest_frame(frames, t0).map(|f| f.image.clone()),
    }];
    while let Some(rv) = select_reference_view(poses, out.last().unwrap(), frames, opts) {
        out.push(rv);
    }
    out
}

/// `(H_{Z0}, H_{Z0}⁻¹)` with `H_{Z0}⁻¹ = R + t·e₃ᵀ / Z0`, where `(R, t)` map
/// RV coordinates into the current camera. `H_{Z0}` takes current normalised
/// points to the plane `Z = Z0` of the RV.
pub fn canonical_homography(t_cur_rv: &Pose, z0: f64) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    if !(z0 > 0.0) {
        return Err(Error::param("canonical plane depth must be positive"));
    }
    let h_inv = plane_homography_inv(t_cur_rv, z0);
    let h = h_inv
        .try_inverse()
        .filter(|_| h_inv.determinant().abs() > 1e-12)
        .ok_or_else(|| Error::Degenerate("camera centre lies on the canonical plane".into()))?;
    Ok((h, h_inv))
}

fn plane_homography_inv(t_cur_rv: &Pose, z: f64) -> Matrix3<f64> {
    t_cur_rv.rotation_matrix() + t_cur_rv.translation * Vector3::z().transpose() / z
}

/// Homography chain `H_{Zi}·H_{Z0}⁻¹` moving a point of the plane `Z0` to `Zi`
/// along the ray through the current camera centre.
pub fn plane_transfer_homography(t_cur_rv: &Pose, z0: f64, zi: f64) -> Result<Matrix3<f64>> {
    let (_, h0_inv) = canonical_homography(t_cur_rv, z0)?;
    let (hi, _) = canonical_homography(t_cur_rv, zi)?;
    Ok(hi * h0_inv)
}

/// Optical centre of the current camera in RV coordinates.
pub fn optical_center(t_cur_rv: &Pose) -> Vec3 {
    -(t_cur_rv.rotation.inverse() * t_cur_rv.translation)
}

/// Closed-form transfer of `x0` from the plane `Z0` to `Zi` along the ray
/// through the optical centre `c`.
pub fn transfer_across_planes(x0: &Vector2<f64>, z0: f64, zi: f64, c: &Vec3) -> Result<Vector2<f64>> {
    if !(zi > 0.0) {
        return Err(Error::param("target plane depth must be positive"));
    }
    let denom = z0 - c.z;
    if denom.abs() < 1e-12 {
        return Err(Error::Singular("optical centre lies on the canonical plane".into()));
    }
    let (a, b) = transfer_coefficients(z0, zi, c.z);
    Ok(Vector2::new(a * x0.x + b * c.x, a * x0.y + b * c.y))
}

#[inline]
fn transfer_coefficients(z0: f64, zi: f64, zc: f64) -> (f64, f64) {
    let s = (zi - zc) / (z0 - zc);
    (z0 * s / zi, (1.0 - s) / zi)
}

/// Ray-vote volume of one reference view.
#[derive(Debug, Clone, PartialEq)]
pub struct Dsi {
    pub width: usize,
    pub height: usize,
    /// Plane depths, strictly increasing.
    pub planes: Vec<f64>,
    /// Plane-major votes: `votes[(i·h + y)·w + x]`.
    pub votes: Vec<f32>,
    pub rv: ReferenceView,
    pub accepted_events: usize,
    /// Events without a pose bracket.
    pub skipped_events: usize,
    /// Vote mass that fell outside the image.
    pub clipped_votes: f64,
}

impl Dsi {
    pub fn new(width: usize, height: usize, planes: Vec<f64>, rv: ReferenceView) -> Result<Self> {
        if planes.is_empty() || planes.windows(2).any(|w| w[1] <= w[0]) || planes[0] <= 0.0 {
            return Err(Error::param("depth planes must be positive and strictly increasing"));
        }
        Ok(Self {
            width,
            height,
            votes: vec![0.0; width * height * planes.len()],
            planes,
            rv,
            accepted_events: 0,
            skipped_events: 0,
            clipped_votes: 0.0,
        })
    }

    pub fn num_planes(&self) -> usize {
        self.planes.len()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, i: usize) -> f32 {
        self.votes[(i * self.height + y) * self.width + x]
    }

    pub fn total_votes(&self) -> f64 {
        self.votes.iter().map(|&v| v as f64).sum()
    }

    /// Writes a header line `w h N Zmin Zmax` followed by little-endian `f32` votes.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let header = format!(
            "{} {} {} {} {}\n",
            self.width,
            self.height,
            self.planes.len(),
            self.planes[0],
            self.planes[self.planes.len() - 1]
        );
        f.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
        for v in &self.votes {
            f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

/// Events per vote chunk; fixed so that both execution policies sum identically.
const VOTE_CHUNK: usize = 1 << 14;
/// Chunks voted concurrently before merging.
const VOTE_BATCH: usize = 8;

struct ChunkVotes {
    votes: Vec<f32>,
    accepted: usize,
    skipped: usize,
    clipped: f64,
}

/// Back-projects `events` into `dsi` using camera poses `T_w_c` interpolated
/// from `poses`. Every accepted event casts one bilinear vote per plane.
pub fn back_project_events(dsi: &mut Dsi, events: &[Event], poses: &[(f64, Pose)], camera: &CameraModel, exec: Exec) -> Result<()> {
    if camera.width != dsi.width || camera.height != dsi.height {
        return Err(Error::param("camera and DSI sizes differ"));
    }
    let (w, h) = (dsi.width, dsi.height);
    let lut: Vec<Vector2<f64>> = (0..w * h)
        .map(|i| {
            let (x, y) = camera.normalize(&Vector2::new((i % w) as f64, (i / w) as f64));
            Vector2::new(x, y)
        })
        .collect();
    let z0 = dsi.planes[dsi.planes.len() / 2];
    let rv_pose = dsi.rv.pose;
    let planes = dsi.planes.clone();
    let n = w * h * planes.len();

    let vote_chunk = |_: usize, chunk: &[Event]| {
        let mut out = ChunkVotes {
            votes: vec![0.0; n],
            accepted: 0,
            skipped: 0,
            clipped: 0.0,
        };
        for e in chunk {
            let (x, y) = (e.x as usize, e.y as usize);
            let Some(cur) = interpolate_pose(poses, e.t).filter(|_| x < w && y < h) else {
                out.skipped += 1;
                continue;
            };
            let t_cur_rv = cur.inverse() * rv_pose;
            let c = optical_center(&t_cur_rv);
            let Ok((hz0, _)) = canonical_homography(&t_cur_rv, z0) else {
                out.skipped += 1;
                continue;
            };
            if (z0 - c.z).abs() < 1e-9 {
                out.skipped += 1;
                continue;
            }
            let q = hz0 * lut[y * w + x].push(1.0);
            if q.z.abs() < 1e-12 {
                out.skipped += 1;
                continue;
            }
            let x0 = Vector2::new(q.x / q.z, q.y / q.z);
            out.accepted += 1;
            for (i, &zi) in planes.iter().enumerate() {
                let (a, b) = transfer_coefficients(z0, zi, c.z);
                let u = camera.fx * (a * x0.x + b * c.x) + camera.cx;
                let v = camera.fy * (a * x0.y + b * c.y) + camera.cy;
                out.clipped += splat(&mut out.votes[i * w * h..(i + 1) * w * h], w, h, u, v);
            }
        }
        out
    };

    for batch in events.chunks(VOTE_CHUNK * VOTE_BATCH) {
        for part in map_chunks(exec, batch, VOTE_CHUNK, vote_chunk) {
            for (d, s) in dsi.votes.iter_mut().zip(&part.votes) {
                *d += s;
            }
            dsi.accepted_events += part.accepted;
            dsi.skipped_events += part.skipped;
            dsi.clipped_votes += part.clipped;
        }
    }
    Ok(())
}

/// Bilinear unit vote at `(u, v)`; returns the weight that fell outside.
#[inline]
fn splat(plane: &mut [f32], w: usize, h: usize, u: f64, v: f64) -> f64 {
    if !(u.is_finite() && v.is_finite()) || u < -1.0 || v < -1.0 || u >= w as f64 || v >= h as f64 {
        return 1.0;
    }
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut clipped = 0.0;
    for (dx, dy, wgt) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
        let (x, y) = (x0 + dx, y0 + dy);
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            plane[y as usize * w + x as usize] += wgt as f32;
        } else {
            clipped += wgt;
        }
    }
    clipped
}

/// Depth at DSI local maxima, in the RV camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiDenseDepthMap {
    pub depth: DepthMap,
    /// Peak vote count per pixel (0 where invalid).
    pub confidence: ImageF,
}

impl SemiDenseDepthMap {
    pub fn density(&self) -> f64 {
        self.depth.valid_count() as f64 / (self.depth.width() * self.depth.height()) as f64
    }
}

/// Per pixel, the best plane of the vote column is kept when it is a local
/// maximum of the volume within `nms_radius`, has at least `min_votes` and
/// exceeds `peak_ratio` times the column mean. Surviving peaks must also reach
/// `relative_confidence` times the 99th percentile of all peaks. Depth is
/// refined by a parabola through the neighbouring planes (interpolated in
/// inverse depth).
pub fn extract_semi_dense(dsi: &Dsi, opts: &MvsOptions, exec: Exec) -> SemiDenseDepthMap {
    let (w, h, n) = (dsi.width, dsi.height, dsi.num_planes());
    let r = opts.nms_radius as i64;
    let rows = crate::par::map_range(exec, h, |y| {
        let mut row = Vec::with_capacity(w);
        for x in 0..w {
            let mut best = 0;
            let mut sum = 0.0f64;
            for i in 0..n {
                let v = dsi.at(x, y, i);
                sum += v as f64;
                if v > dsi.at(x, y, best) {
                    best = i;
                }
            }
            let peak = dsi.at(x, y, best) as f64;
            if peak <= 0.0 || peak < opts.min_votes || peak < opts.peak_ratio * sum / n as f64 {
                row.push(None);
                continue;
            }
            let mut is_max = true;
            'nbhd: for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, best as i64 + dz);
                        if (dx, dy, dz) == (0, 0, 0) || xx < 0 || yy < 0 || zz < 0 || xx >= w as i64 || yy >= h as i64 || zz >= n as i64 {
                            continue;
                        }
                        if dsi.at(xx as usize, yy as usize, zz as usize) as f64 > peak {
                            is_max = false;
                            break 'nbhd;
                        }
                    }
                }
            }
            if !is_max {
                row.push(None);
                continue;
            }
            let mut offset = 0.0;
            if best > 0 && best + 1 < n {
                let (a, b, c) = (dsi.at(x, y, best - 1) as f64, peak, dsi.at(x, y, best + 1) as f64);
                let curv = a - 2.0 * b + c;
                if curv < 0.0 {
                    offset = (0.5 * (a - c) / curv).clamp(-0.5, 0.5);
                }
            }
            let inv = |i: usize| 1.0 / dsi.planes[i];
            let lambda = if offset >= 0.0 && best + 1 < n {
                inv(best) + offset * (inv(best + 1) - inv(best))
            } else if offset < 0.0 {
                inv(best) - offset * (inv(best - 1) - inv(best))
            } else {
                inv(best)
            };
            let depth = (1.0 / lambda).clamp(dsi.planes[0], dsi.planes[n - 1]);
            row.push(Some((depth, peak)));
        }
        row
    });
    let mut peaks: Vec<f64> = rows.iter().flatten().flatten().map(|(_, c)| *c).collect();
    let floor = if peaks.is_empty() || opts.relative_confidence <= 0.0 {
        0.0
    } else {
        peaks.sort_by(f64::total_cmp);
        opts.relative_confidence * peaks[(peaks.len() - 1) * 99 / 100]
    };
    let mut depth = DepthMap::invalid(w, h);
    let mut confidence = ImageF::new(w, h, 0.0);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, v) in row.into_iter().enumerate() {
            if let Some((d, c)) = v.filter(|(_, c)| *c >= floor) {
                depth.depth.set(x, y, d);
                depth.valid.set(x, y, true);
                confidence.set(x, y, c);
            }
        }
    }
    SemiDenseDepthMap { depth, confidence }
}

/// Builds and evaluates the DSI of `rv` from `events`.
pub fn semi_dense_from_events(
    rv: &ReferenceView,
    events: &[Event],
    poses: &[(f64, Pose)],
    camera: &CameraModel,
    opts: &MvsOptions,
    exec: Exec,
) -> Result<(SemiDenseDepthMap, Dsi)> {
    opts.validate()?;
    let mut dsi = Dsi::new(camera.width, camera.height, opts.depth_planes(), rv.clone())?;
    back_project_events(&mut dsi, events, poses, camera, exec)?;
    let semi = extract_semi_dense(&dsi, opts, exec);
    Ok((semi, dsi))
}
