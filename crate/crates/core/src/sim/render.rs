//! Ray-cast rendering of intensity and ground-truth depth.

use nalgebra::Matrix3;

use crate::camera::{CameraModel, Pixel};
use crate::geometry::{Pose, Vec3};
use crate::image::{DepthMap, Grid, ImageF, IntensityImage};
use crate::par::{self, Exec};
use crate::sim::scene::{Primitive, SceneModel};

/// Per-pixel unit-depth rays in the camera frame, cached per camera.
#[derive(Debug, Clone)]
pub struct RayTable {
    spp: usize,
    rays: Vec<Vec3>,
}

impl RayTable {
    /// `supersample × supersample` rays per pixel on a regular sub-grid.
    pub fn new(camera: &CameraModel, supersample: usize) -> Self {
        let s = supersample.max(1);
        let off = |i: usize| (i as f64 + 0.5) / s as f64 - 0.5;
        let mut rays = Vec::with_capacity(camera.width * camera.height * s * s);
        for y in 0..camera.height {
            for x in 0..camera.width {
                for sy in 0..s {
                    for sx in 0..s {
                        rays.push(camera.ray(&Pixel::new(x as f64 + off(sx), y as f64 + off(sy))));
                    }
                }
            }
        }
        Self { spp: s * s, rays }
    }

    pub(crate) fn samples_per_pixel(&self) -> usize {
        self.spp
    }
}

/// Scene primitives pre-transformed for a fixed camera centre.
enum Prepared<'a> {
    Plane {
        origin_local: Vec3,
        world_to_local: Matrix3<f64>,
        half_width: f64,
        half_height: f64,
        prim: &'a Primitive,
    },
    Other(&'a Primitive),
}

struct PreparedScene<'a> {
    origin: Vec3,
    items: Vec<Prepared<'a>>,
}

impl<'a> PreparedScene<'a> {
    fn new(scene: &'a SceneModel, origin: Vec3) -> Self {
        let items = scene
            .primitives
            .iter()
            .map(|p| match p {
                Primitive::Plane {
                    pose,
                    half_width,
                    half_height,
                    ..
                } => Prepared::Plane {
                    origin_local: pose.inverse_transform_point(&origin),
                    world_to_local: pose.rotation_matrix().transpose(),
                    half_width: *half_width,
                    half_height: *half_height,
                    prim: p,
                },
                other => Prepared::Other(other),
            })
            .collect();
        Self { origin, items }
    }

    /// `(distance along d, intensity)` of the nearest hit.
    fn cast(&self, d: &Vec3) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for item in &self.items {
            match item {
                Prepared::Plane {
                    origin_local,
                    world_to_local,
                    half_width,
                    half_height,
                    prim,
                } => {
                    let ld = world_to_local * d;
                    if ld.z.abs() < 1e-15 {
                        continue;
                    }
                    let t = -origin_local.z / ld.z;
                    if t <= 1e-9 || best.is_some_and(|b| b.0 <= t) {
                        continue;
                    }
                    let px = origin_local.x + ld.x * t;
                    let py = origin_local.y + ld.y * t;
                    if px.abs() > *half_width || py.abs() > *half_height {
                        continue;
                    }
                    if let Primitive::Plane { texture, .. } = prim {
                        best = Some((t, texture.eval(px + half_width, py + half_height)));
                    }
                }
                Prepared::Other(p) => {
                    if let Some(h) = p.intersect(&self.origin, d) {
                        if best.is_none_or(|b| h.t < b.0) {
                            best = Some((h.t, h.intensity));
                        }
                    }
                }
            }
        }
        best
    }
}

/// Casts the rays of a [`RayTable`] from one camera pose.
pub(crate) struct FrameCaster<'a> {
    prepared: PreparedScene<'a>,
    rot: Matrix3<f64>,
}

impl<'a> FrameCaster<'a> {
    pub(crate) fn new(scene: &'a SceneModel, pose_wc: &Pose) -> Self {
        Self {
            prepared: PreparedScene::new(scene, pose_wc.translation),
            rot: pose_wc.rotation_matrix(),
        }
    }

    /// Mean intensity over the pixel's samples and the depth of its central sample,
    /// or `None` when every sample misses.
    pub(crate) fn pixel(&self, rays: &RayTable, index: usize) -> Option<(f64, f64)> {
        let spp = rays.samples_per_pixel();
        let base = index * spp;
        let mut acc = 0.0;
        let mut hits = 0usize;
        let mut depth = 0.0;
        for (k, r) in rays.rays[base..base + spp].iter().enumerate() {
            if let Some((t, i)) = self.prepared.cast(&(self.rot * r)) {
                acc += i;
                hits += 1;
                if k == spp / 2 || hits == 1 {
                    depth = t;
                }
            }
        }
        (hits > 0).then(|| (acc / spp as f64, depth))
    }
}

/// Renders intensity and metric depth in one pass.
pub fn render_with_rays(
    scene: &SceneModel,
    pose_wc: &Pose,
    camera: &CameraModel,
    rays: &RayTable,
    exec: Exec,
) -> (IntensityImage, DepthMap) {
    let caster = FrameCaster::new(scene, pose_wc);
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<Option<(f64, f64)>>> =
        par::map_range(exec, h, |y| (0..w).map(|x| caster.pixel(rays, y * w + x)).collect());
    let mut intensity = ImageF::new(w, h, 0.0);
    let mut depth = ImageF::new(w, h, 0.0);
    let mut valid = Grid::new(w, h, false);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, hit) in row.into_iter().enumerate() {
            if let Some((i, d)) = hit {
                intensity.set(x, y, i);
                depth.set(x, y, d);
                valid.set(x, y, true);
            }
        }
    }
    (
        IntensityImage {
            pixels: intensity,
            valid: valid.clone(),
        },
        DepthMap { depth, valid },
    )
}

/// Ray-cast intensity; pixels without a hit are flagged invalid and read 0.
pub fn render_intensity(scene: &SceneModel, pose_wc: &Pose, camera: &CameraModel) -> IntensityImage {
    render_with_rays(scene, pose_wc, camera, &RayTable::new(camera, 1), Exec::default()).0
}

/// Ray-cast metric depth along the optical axis.
pub fn ground_truth_depth(scene: &SceneModel, pose_wc: &Pose, camera: &CameraModel) -> DepthMap {
    render_with_rays(scene, pose_wc, camera, &RayTable::new(camera, 1), Exec::default()).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::{fronto_parallel_plane, Texture};

    fn cam() -> CameraModel {
        CameraModel::new(100.0, 100.0, 40.0, 30.0, 80, 60).unwrap()
    }

    #[test]
    fn uniform_plane_is_constant() {
        let scene = SceneModel::new(vec![fronto_parallel_plane(2.0, 10.0, Texture::Uniform { value: 0.6 })]).unwrap();
        let img = render_intensity(&scene, &Pose::identity(), &cam());
        assert!(img.pixels.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
        assert!(img.valid.data().iter().all(|v| *v));
    }

    #[test]
    fn two_tone_step_edge_at_projected_boundary() {
        // Stripes of period 10 m centred so that the boundary sits at world x = 0.
        let scene = SceneModel::new(vec![Primitive::Plane {
            pose: Pose::from_translation(Vec3::new(0.0, 0.0, 2.0)),
            half_width: 10.0,
            half_height: 10.0,
            texture: Texture::Stripes {
                period: 10.0,
                low: 0.2,
                high: 0.9,
            },
        }])
        .unwrap();
        let img = render_intensity(&scene, &Pose::identity(), &cam());
        // x = 0 projects to column cx = 40: columns < 40 see s ∈ [0,10) (high), ≥ 40 see low.
        for y in 0..60 {
            assert_eq!(img.pixels.at(39, y), 0.9);
            assert_eq!(img.pixels.at(40, y), 0.2);
        }
    }

    #[test]
    fn checkerboard_corners_project_analytically() {
        let period = 0.25;
        let scene = SceneModel::new(vec![Primitive::Plane {
            pose: Pose::from_translation(Vec3::new(0.0, 0.0, 2.0)),
            half_width: 1.0,
            half_height: 1.0,
            texture: Texture::Checkerboard {
                period,
                low: 0.0,
                high: 1.0,
            },
        }])
        .unwrap();
        let c = cam();
        let img = render_intensity(&scene, &Pose::identity(), &c);
        // Corner at world (0.25 - 1.0 + 1.0, ...) = local s = 1.25 → x = 0.25; project by hand.
        let corner = Vec3::new(0.25, 0.25, 2.0);
        let u = 100.0 * corner.x / corner.z + 40.0;
        let v = 100.0 * corner.y / corner.z + 30.0;
        // The 2x2 block around the corner must contain both colours in a checker arrangement.
        let (ui, vi) = (u.round() as usize, v.round() as usize);
        let a = img.pixels.at(ui - 1, vi - 1);
        let b = img.pixels.at(ui, vi - 1);
        let c2 = img.pixels.at(ui - 1, vi);
        let d = img.pixels.at(ui, vi);
        assert_eq!(a, d);
        assert_eq!(b, c2);
        assert_ne!(a, b);
        assert!((u - ui as f64).abs() <= 0.5 && (v - vi as f64).abs() <= 0.5);
    }

    #[test]
    fn depth_examples() {
        let c = cam();
        let scene = SceneModel::new(vec![fronto_parallel_plane(2.0, 10.0, Texture::Uniform { value: 0.5 })]).unwrap();
        let d = ground_truth_depth(&scene, &Pose::identity(), &c);
        assert!(d.depth.data().iter().all(|v| (v - 2.0).abs() < 1e-12));

        let empty = SceneModel::default();
        assert_eq!(ground_truth_depth(&empty, &Pose::identity(), &c).valid_count(), 0);

        // Plane tilted about the y axis: inverse depth is affine in the column.
        let tilt = crate::geometry::so3_exp(&Vec3::new(0.0, 0.3, 0.0));
        let scene = SceneModel::new(vec![Primitive::Plane {
            pose: Pose::new(tilt, Vec3::new(0.0, 0.0, 2.0)),
            half_width: 10.0,
            half_height: 10.0,
            texture: Texture::Uniform { value: 0.5 },
        }])
        .unwrap();
        let d = ground_truth_depth(&scene, &Pose::identity(), &c);
        // Closed form: plane n·X = n·P0 with X = Z·(x, y, 1) ⇒ 1/Z = n·(x, y, 1)/(n·P0).
        let n = tilt * Vec3::z();
        let k = n.dot(&Vec3::new(0.0, 0.0, 2.0));
        for &(u, v) in &[(5usize, 7usize), (40, 30), (70, 50)] {
            let x = (u as f64 - 40.0) / 100.0;
            let y = (v as f64 - 30.0) / 100.0;
            let expect = k / n.dot(&Vec3::new(x, y, 1.0));
            assert!((d.depth.at(u, v) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn intensity_and_depth_masks_agree() {
        let c = cam();
        let scene = SceneModel::new(vec![fronto_parallel_plane(2.0, 0.4, Texture::Uniform { value: 0.5 })]).unwrap();
        let (img, depth) = render_with_rays(&scene, &Pose::identity(), &c, &RayTable::new(&c, 1), Exec::Sequential);
        assert_eq!(img.valid, depth.valid);
        assert!(depth.valid_count() > 0 && depth.valid_count() < 80 * 60);
    }
}
