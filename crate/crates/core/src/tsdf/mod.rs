//! Truncated signed distance fusion on a sparse block grid, with marching-cubes
//! surface extraction.
//!
//! Depth points are grouped by the voxel they fall in. Each group casts a
//! single ray from the camera centre through its weighted-mean point, and the
//! voxels that ray crosses near the surface receive a weighted running-mean
//! update of their signed distance.

mod tables;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, Pixel};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::image::{DepthMap, ImageF};
use crate::par::{map_chunks, map_slice, Exec};

pub const BLOCK_SIDE: i64 = 8;
const BLOCK_VOXELS: usize = (BLOCK_SIDE * BLOCK_SIDE * BLOCK_SIDE) as usize;

pub type VoxelIndex = [i64; 3];
pub type BlockKey = [i64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsdfOptions {
    /// Voxel edge length in metres; the truncation distance is four voxels.
    pub voxel_size: f64,
    pub max_weight: f64,
    /// Update every voxel from the camera centre to the surface band instead of
    /// the band alone.
    pub full_ray_update: bool,
}

impl Default for TsdfOptions {
    fn default() -> Self {
        Self {
            voxel_size: 0.01,
            max_weight: 100.0,
            full_ray_update: false,
        }
    }
}

impl TsdfOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::param("voxel_size must be positive"));
        }
        if !(self.max_weight > 0.0) {
            return Err(Error::param("max_weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TsdfVoxel {
    pub d: f64,
    pub w: f64,
    /// Weighted mean intensity in `[0, 1]`.
    pub color: f64,
}

/// `‖P − V‖ · sign((P − V)·(P − O))`: positive in front of the surface.
pub fn signed_distance(v: &Vec3, p: &Vec3, o: &Vec3) -> f64 {
    let pv = p - v;
    let s = pv.dot(&(p - o));
    if s < 0.0 {
        -pv.norm()
    } else {
        pv.norm()
    }
}

/// Observation weight `1/ρ²`, ramped to zero between `−ε` and `−d_t = −4ε`.
pub fn point_weight(d: f64, rho: f64, eps: f64) -> f64 {
    let dt = 4.0 * eps;
    let base = 1.0 / (rho * rho);
    if d >= -eps {
        base
    } else if d >= -dt {
        base * (d + dt) / (dt - eps)
    } else {
        0.0
    }
}

/// Running weighted mean of `D` and colour with the weight capped at `w_max`.
pub fn update_voxel(v: TsdfVoxel, d: f64, w: f64, w_max: f64, dt: f64, color: f64) -> TsdfVoxel {
    let total = v.w + w;
    if total <= 0.0 {
        return v;
    }
    let d = d.clamp(-dt, dt);
    TsdfVoxel {
        d: (v.w * v.d + w * d) / total,
        w: total.min(w_max),
        color: (v.w * v.color + w * color) / total,
    }
}

/// Voxels crossed by the segment `a → b` in traversal order (3D DDA).
pub fn traverse(a: &Vec3, b: &Vec3, eps: f64) -> Vec<VoxelIndex> {
    let cell = |p: &Vec3| [(p.x / eps).floor() as i64, (p.y / eps).floor() as i64, (p.z / eps).floor() as i64];
    let mut v = cell(a);
    let last = cell(b);
    let delta = b - a;
    let len = delta.norm();
    let mut out = vec![v];
    if len == 0.0 {
        return out;
    }
    let dir = delta / len;
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for k in 0..3 {
        if dir[k] > 0.0 {
            step[k] = 1;
            t_max[k] = ((v[k] + 1) as f64 * eps - a[k]) / dir[k];
            t_delta[k] = eps / dir[k];
        } else if dir[k] < 0.0 {
            step[k] = -1;
            t_max[k] = (v[k] as f64 * eps - a[k]) / dir[k];
            t_delta[k] = -eps / dir[k];
        }
    }
    let limit = 3 * (len / eps).ceil() as usize + 3;
    while v != last && out.len() <= limit {
        let k = (0..3).min_by(|&i, &j| t_max[i].total_cmp(&t_max[j])).unwrap();
        if t_max[k] > len {
            break;
        }
        v[k] += step[k];
        t_max[k] += t_delta[k];
        out.push(v);
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrationStats {
    pub points: usize,
    /// Voxel groups, one ray each.
    pub rays: usize,
    pub voxel_updates: usize,
}

type Block = Box<[TsdfVoxel; BLOCK_VOXELS]>;

/// Sparse TSDF volume of 8³ voxel blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfGrid {
    eps: f64,
    w_max: f64,
    full_ray_update: bool,
    blocks: BTreeMap<BlockKey, Block>,
}

fn split(v: VoxelIndex) -> (BlockKey, usize) {
    let b = [v[0].div_euclid(BLOCK_SIDE), v[1].div_euclid(BLOCK_SIDE), v[2].div_euclid(BLOCK_SIDE)];
    let l = [v[0].rem_euclid(BLOCK_SIDE), v[1].rem_euclid(BLOCK_SIDE), v[2].rem_euclid(BLOCK_SIDE)];
    (b, ((l[2] * BLOCK_SIDE + l[1]) * BLOCK_SIDE + l[0]) as usize)
}

fn join(b: BlockKey, i: usize) -> VoxelIndex {
    let i = i as i64;
    [
        b[0] * BLOCK_SIDE + i % BLOCK_SIDE,
        b[1] * BLOCK_SIDE + (i / BLOCK_SIDE) % BLOCK_SIDE,
        b[2] * BLOCK_SIDE + i / (BLOCK_SIDE * BLOCK_SIDE),
    ]
}

struct Group {
    w: f64,
    p: Vec3,
    rho: f64,
    color: f64,
}

impl TsdfGrid {
    pub fn new(opts: &TsdfOptions) -> Result<Self> {
        opts.validate()?;
        Ok(Self {
            eps: opts.voxel_size,
            w_max: opts.max_weight,
            full_ray_update: opts.full_ray_update,
            blocks: BTreeMap::new(),
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.eps
    }

    pub fn truncation(&self) -> f64 {
        4.0 * self.eps
    }

    pub fn max_weight(&self) -> f64 {
        self.w_max
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_keys(&self) -> impl Iterator<Item = &BlockKey> {
        self.blocks.keys()
    }

    pub fn observed_voxels(&self) -> usize {
        self.blocks.values().map(|b| b.iter().filter(|v| v.w > 0.0).count()).sum()
    }

    pub fn voxel_of(&self, p: &Vec3) -> VoxelIndex {
        [(p.x / self.eps).floor() as i64, (p.y / self.eps).floor() as i64, (p.z / self.eps).floor() as i64]
    }

    pub fn voxel_center(&self, v: VoxelIndex) -> Vec3 {
        Vec3::new(v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5) * self.eps
    }

    /// Voxel contents; `None` for never-observed voxels.
    pub fn get(&self, v: VoxelIndex) -> Option<TsdfVoxel> {
        let (b, i) = split(v);
        self.blocks.get(&b).map(|blk| blk[i]).filter(|x| x.w > 0.0)
    }

    fn voxel_mut(&mut self, v: VoxelIndex) -> &mut TsdfVoxel {
        let (b, i) = split(v);
        &mut self.blocks.entry(b).or_insert_with(|| Box::new([TsdfVoxel::default(); BLOCK_VOXELS]))[i]
    }

    /// Applies one observation to a voxel.
    pub fn update(&mut self, v: VoxelIndex, d: f64, w: f64, color: f64) {
        let (w_max, dt) = (self.w_max, self.truncation());
        let vox = self.voxel_mut(v);
        *vox = update_voxel(*vox, d, w, w_max, dt, color);
    }

    /// Writes `f` (truncated) with unit weight into every voxel of the box whose
    /// centre lies within the truncation band.
    pub fn fill_sdf(&mut self, lo: &Vec3, hi: &Vec3, f: impl Fn(&Vec3) -> f64) {
        let (a, b) = (self.voxel_of(lo), self.voxel_of(hi));
        let dt = self.truncation();
        for z in a[2]..=b[2] {
            for y in a[1]..=b[1] {
                for x in a[0]..=b[0] {
                    let v = [x, y, z];
                    let d = f(&self.voxel_center(v));
                    if d.abs() <= dt {
                        *self.voxel_mut(v) = TsdfVoxel { d, w: 1.0, color: 0.5 };
                    }
                }
            }
        }
    }

    /// Fuses a depth map seen from `pose` (`T_w_c`).
    pub fn integrate_depth_map(
        &mut self,
        depth: &DepthMap,
        intensity: Option<&ImageF>,
        pose: &Pose,
        camera: &CameraModel,
        exec: Exec,
    ) -> IntegrationStats {
        let mut groups: BTreeMap<VoxelIndex, Group> = BTreeMap::new();
        let mut stats = IntegrationStats::default();
        for y in 0..depth.height() {
            for x in 0..depth.width() {
                let Some(rho) = depth.get(x, y) else {
                    continue;
                };
                let Ok(pc) = camera.back_project(&Pixel::new(x as f64, y as f64), 1.0 / rho) else {
                    continue;
                };
                let pw = pose.transform_point(&pc);
                let w = 1.0 / (rho * rho);
                let c = intensity.map_or(0.5, |img| img.at(x, y));
                let g = groups.entry(self.voxel_of(&pw)).or_insert(Group {
                    w: 0.0,
                    p: Vec3::zeros(),
                    rho: 0.0,
                    color: 0.0,
                });
                g.w += w;
                g.p += w * pw;
                g.rho += w * rho;
                g.color += w * c;
                stats.points += 1;
            }
        }
        let groups: Vec<Group> = groups
            .into_values()
            .map(|g| Group { p: g.p / g.w, rho: g.rho / g.w, color: g.color / g.w, w: g.w })
            .collect();
        stats.rays = groups.len();
        let origin = pose.translation;
        let axis = pose.rotation * Vec3::z();
        let (eps, dt, full) = (self.eps, self.truncation(), self.full_ray_update);
        let updates = map_chunks(exec, &groups, 256, |_, chunk| {
            let mut out = Vec::new();
            for g in chunk {
                let ray = g.p - origin;
                let len = ray.norm();
                if len <= 0.0 {
                    continue;
                }
                let dir = ray / len;
                let axis_dot_dir = axis.dot(&dir);
                if axis_dot_dir <= 0.0 {
                    continue;
                }
                let start = if full { origin } else { g.p - dt * dir };
                for v in traverse(&start, &(g.p + dt * dir), eps) {
                    let c = Vec3::new(v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5) * eps;
                    // Sample the ray at the voxel's depth along the optical axis.
                    let on_ray = origin + (axis.dot(&(c - origin)) / axis_dot_dir) * dir;
                    let d = signed_distance(&on_ray, &g.p, &origin);
                    let w = point_weight(d, g.rho, eps);
                    if w > 0.0 {
                        out.push((v, d, w, g.color));
                    }
                }
            }
            out
        });
        for (v, d, w, c) in updates.into_iter().flatten() {
            self.update(v, d, w, c);
            stats.voxel_updates += 1;
        }
        stats
    }

    /// Zero crossings of `D` between consecutive observed voxels along +axis
    /// through the voxel column at `(i, j)` of the other two axes.
    pub fn zero_crossings(&self, axis: usize, i: i64, j: i64, range: std::ops::Range<i64>) -> Vec<f64> {
        let idx = |k: i64| {
            let mut v = [0; 3];
            v[axis] = k;
            v[(axis + 1) % 3] = i;
            v[(axis + 2) % 3] = j;
            v
        };
        let mut out = Vec::new();
        for k in range {
            if let (Some(a), Some(b)) = (self.get(idx(k)), self.get(idx(k + 1))) {
                if (a.d >= 0.0) != (b.d >= 0.0) {
                    let s = a.d / (a.d - b.d);
                    out.push((k as f64 + 0.5 + s) * self.eps);
                }
            }
        }
        out
    }

    /// Marching cubes over cubes of voxel centres whose eight corners are observed.
    pub fn extract_mesh(&self, exec: Exec) -> Mesh {
        let keys: Vec<BlockKey> = self.blocks.keys().copied().collect();
        let per_block = map_slice(exec, &keys, |b| self.block_triangles(*b));
        let mut mesh = Mesh::default();
        let mut index: HashMap<(VoxelIndex, u8), u32> = HashMap::new();
        for tris in per_block {
            for tri in tris {
                let mut ids = [0u32; 3];
                for (k, (key, pos, color)) in tri.corners.into_iter().enumerate() {
                    ids[k] = *index.entry(key).or_insert_with(|| {
                        mesh.vertices.push(pos);
                        mesh.normals.push(Vec3::zeros());
                        mesh.colors.push(color);
                        (mesh.vertices.len() - 1) as u32
                    });
                }
                if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                    continue;
                }
                for id in ids {
                    mesh.normals[id as usize] += tri.normal;
                }
                mesh.triangles.push(ids);
            }
        }
        for n in &mut mesh.normals {
            if n.norm() > 0.0 {
                n.normalize_mut();
            }
        }
        mesh
    }

    fn block_triangles(&self, key: BlockKey) -> Vec<Triangle> {
        const CORNERS: [[i64; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
        const EDGES: [[usize; 2]; 12] = [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];
        let mut out = Vec::new();
        for i in 0..BLOCK_VOXELS {
            let base = join(key, i);
            let mut vox = [TsdfVoxel::default(); 8];
            let mut complete = true;
            for (c, off) in CORNERS.iter().enumerate() {
                match self.get([base[0] + off[0], base[1] + off[1], base[2] + off[2]]) {
                    Some(v) => vox[c] = v,
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if !complete {
                continue;
            }
            let case = (0..8).fold(0usize, |m, c| m | (usize::from(vox[c].d < 0.0) << c));
            if case == 0 || case == 255 {
                continue;
            }
            // SDF gradient across the cube, pointing out of the surface.
            let mut grad = Vec3::zeros();
            for (c, off) in CORNERS.iter().enumerate() {
                for k in 0..3 {
                    grad[k] += if off[k] == 1 { vox[c].d } else { -vox[c].d };
                }
            }
            let edge_vertex = |e: usize| {
                let [mut a, mut b] = EDGES[e];
                // Interpolate from the lower corner so shared edges agree bit for bit.
                if CORNERS[a].iter().sum::<i64>() > CORNERS[b].iter().sum::<i64>() {
                    std::mem::swap(&mut a, &mut b);
                }
                let axis = (0..3).find(|&k| CORNERS[a][k] != CORNERS[b][k]).unwrap() as u8;
                let va = [base[0] + CORNERS[a][0], base[1] + CORNERS[a][1], base[2] + CORNERS[a][2]];
                let vb = [base[0] + CORNERS[b][0], base[1] + CORNERS[b][1], base[2] + CORNERS[b][2]];
                let s = vox[a].d / (vox[a].d - vox[b].d);
                let (pa, pb) = (self.voxel_center(va), self.voxel_center(vb));
                let pos = Point3::from(pa + s * (pb - pa));
                ((va, axis), pos, vox[a].color + s * (vox[b].color - vox[a].color))
            };
            let row = &tables::TRIANGLES[case];
            for t in row.chunks(3).take_while(|t| t[0] >= 0) {
                let mut corners = [edge_vertex(t[0] as usize), edge_vertex(t[1] as usize), edge_vertex(t[2] as usize)];
                let mut normal = (corners[1].1 - corners[0].1).cross(&(corners[2].1 - corners[0].1));
                if normal.norm() <= 1e-12 * self.eps * self.eps {
                    continue;
                }
                if normal.dot(&grad) < 0.0 {
                    corners.swap(1, 2);
                    normal = -normal;
                }
                out.push(Triangle { corners, normal });
            }
        }
        out
    }

    /// Block-sparse binary snapshot: a text header `eps d_t W_max block_count`,
    /// then per block three `i64` keys and 512 `(D, W, colour)` `f32` triples.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut buf = format!("{} {} {} {}\n", self.eps, self.truncation(), self.w_max, self.blocks.len()).into_bytes();
        for (k, blk) in &self.blocks {
            for c in k {
                buf.extend_from_slice(&c.to_le_bytes());
            }
            for v in blk.iter() {
                for x in [v.d, v.w, v.color] {
                    buf.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), line: 1, msg: msg.to_string() };
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad("header needs `eps d_t W_max block_count`"));
        }
        let eps: f64 = f[0].parse().map_err(|_| bad("bad eps"))?;
        let w_max: f64 = f[2].parse().map_err(|_| bad("bad W_max"))?;
        let count: usize = f[3].parse().map_err(|_| bad("bad block count"))?;
        let mut grid = TsdfGrid::new(&TsdfOptions { voxel_size: eps, max_weight: w_max, full_ray_update: false })?;
        let mut pos = nl + 1;
        let block_bytes = 24 + BLOCK_VOXELS * 12;
        if bytes.len() != pos + count * block_bytes {
            return Err(bad("payload size does not match the block count"));
        }
        let f32_at = |p: usize| f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as f64;
        for _ in 0..count {
            let key = [0, 8, 16].map(|o| i64::from_le_bytes(bytes[pos + o..pos + o + 8].try_into().unwrap()));
            pos += 24;
            let mut blk = Box::new([TsdfVoxel::default(); BLOCK_VOXELS]);
            for v in blk.iter_mut() {
                *v = TsdfVoxel { d: f32_at(pos), w: f32_at(pos + 4), color: f32_at(pos + 8) };
                pos += 12;
            }
            grid.blocks.insert(key, blk);
        }
        Ok(grid)
    }
}

struct Triangle {
    corners: [((VoxelIndex, u8), Point3<f64>, f64); 3],
    normal: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub normals: Vec<Vec3>,
    /// Intensity in `[0, 1]` per vertex.
    pub colors: Vec<f64>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let grey: Vec<u8> = self.colors.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        crate::io::write_mesh_ply(path, &self.vertices, &self.normals, &grey, &self.triangles)
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        crate::io::write_mesh_obj(path, &self.vertices, &self.normals, &self.triangles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = 0.01;

    fn grid() -> TsdfGrid {
        TsdfGrid::new(&TsdfOptions::default()).unwrap()
    }

    #[test]
    fn signed_distance_examples() {
        let o = Vec3::zeros();
        let p = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(signed_distance(&Vec3::new(0.0, 0.0, 0.5), &p, &o), 0.5);
        assert!((signed_distance(&Vec3::new(0.0, 0.0, 1.2), &p, &o) + 0.2).abs() < 1e-15);
        assert_eq!(signed_distance(&p, &p, &o), 0.0);
    }

    #[test]
    fn point_weight_examples() {
        let dt = 4.0 * EPS;
        assert_eq!(point_weight(0.0, 2.0, EPS), 0.25);
        assert_eq!(point_weight(-dt, 1.0, EPS), 0.0);
        assert!((point_weight(-(EPS + dt) / 2.0, 1.0, EPS) - 0.5).abs() < 1e-12);
        assert_eq!(point_weight(-dt - 1e-6, 1.0, EPS), 0.0);
        assert_eq!(point_weight(-EPS, 1.0, EPS), 1.0);
    }

    #[test]
    fn update_voxel_examples() {
        let dt = 0.04;
        let v = update_voxel(TsdfVoxel::default(), 0.01, 0.3, 100.0, dt, 0.2);
        assert_eq!((v.d, v.w), (0.01, 0.3));
        let v2 = update_voxel(v, 0.01, 0.3, 100.0, dt, 0.2);
        assert!((v2.d - 0.01).abs() < 1e-15 && (v2.w - 0.6).abs() < 1e-15);
        // At the cap, D still blends with the uncapped weights.
        let full = TsdfVoxel { d: 0.02, w: 100.0, color: 0.0 };
        let u = update_voxel(full, -0.03, 4.0, 100.0, dt, 1.0);
        assert!((u.d - (100.0 * 0.02 + 4.0 * -0.03) / 104.0).abs() < 1e-15);
        assert_eq!(u.w, 100.0);
        // Observations are truncated before blending.
        assert_eq!(update_voxel(TsdfVoxel::default(), 0.5, 1.0, 100.0, dt, 0.0).d, dt);
        // Zero total weight is a no-op.
        assert_eq!(update_voxel(TsdfVoxel::default(), 0.5, 0.0, 100.0, dt, 0.0), TsdfVoxel::default());
    }

    #[test]
    fn dda_visits_face_connected_cells() {
        let a = Vec3::new(0.003, 0.017, -0.002);
        let b = Vec3::new(0.094, -0.033, 0.051);
        let cells = traverse(&a, &b, EPS);
        assert_eq!(cells[0], [0, 1, -1]);
        assert_eq!(*cells.last().unwrap(), [9, -4, 5]);
        for w in cells.windows(2) {
            let diff: i64 = (0..3).map(|k| (w[1][k] - w[0][k]).abs()).sum();
            assert_eq!(diff, 1);
        }
        // Every cell is actually hit by the segment.
        for c in &cells {
            let lo = Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * EPS;
            let hit = (0..=2000).any(|i| {
                let p = a + (b - a) * (i as f64 / 2000.0);
                (0..3).all(|k| p[k] >= lo[k] - 1e-9 && p[k] <= lo[k] + EPS + 1e-9)
            });
            assert!(hit, "{c:?}");
        }
    }

    #[test]
    fn empty_depth_map_leaves_grid_unchanged() {
        let cam = CameraModel::new(140.0, 140.0, 79.5, 59.5, 160, 120).unwrap();
        let mut g = grid();
        let s = g.integrate_depth_map(&DepthMap::invalid(160, 120), None, &Pose::identity(), &cam, Exec::Sequential);
        assert_eq!(s.rays, 0);
        assert_eq!(g, grid());
    }

    #[test]
    fn points_sharing_a_voxel_cast_one_ray() {
        let cam = CameraModel::new(2000.0, 2000.0, 1.0, 1.0, 3, 3).unwrap();
        let mut depth = DepthMap::invalid(3, 3);
        for (x, y) in [(1, 1), (2, 1)] {
            depth.depth.set(x, y, 1.001);
            depth.valid.set(x, y, true);
        }
        let mut g = grid();
        let s = g.integrate_depth_map(&depth, None, &Pose::identity(), &cam, Exec::Sequential);
        assert_eq!((s.points, s.rays), (2, 1));
    }

    #[test]
    fn untouched_space_has_no_blocks() {
        let cam = CameraModel::new(140.0, 140.0, 79.5, 59.5, 160, 120).unwrap();
        let mut depth = DepthMap::invalid(160, 120);
        depth.depth.set(80, 60, 2.0);
        depth.valid.set(80, 60, true);
        let mut g = grid();
        g.integrate_depth_map(&depth, None, &Pose::identity(), &cam, Exec::Sequential);
        assert!(g.block_count() <= 4);
        assert!(g.get(g.voxel_of(&Vec3::new(0.0, 0.0, 1.0))).is_none());
    }

    #[test]
    fn sphere_sdf_meshes_accurately() {
        let mut g = grid();
        let r = 0.5;
        g.fill_sdf(&Vec3::repeat(-0.6), &Vec3::repeat(0.6), |p| p.norm() - r);
        let mesh = g.extract_mesh(Exec::Parallel);
        assert!(!mesh.is_empty());
        let errs: Vec<f64> = mesh.vertices.iter().map(|v| (v.coords.norm() - r).abs()).collect();
        let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        assert!(rms <= EPS / 2.0, "{rms}");
        assert!(errs.iter().all(|e| *e <= EPS));
        // Normals point outwards.
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            assert!(n.dot(&v.coords.normalize()) > 0.9);
        }
    }

    #[test]
    fn all_positive_field_gives_empty_mesh() {
        let mut g = grid();
        g.fill_sdf(&Vec3::zeros(), &Vec3::repeat(0.1), |_| 0.02);
        assert!(g.extract_mesh(Exec::Sequential).is_empty());
    }

    #[test]
    fn linear_sdf_vertices_are_exact() {
        let n = Vec3::new(0.3, -0.2, 0.9).normalize();
        let offset = 0.0137;
        let mut g = grid();
        g.fill_sdf(&Vec3::repeat(-0.1), &Vec3::repeat(0.1), |p| n.dot(p) - offset);
        let mesh = g.extract_mesh(Exec::Sequential);
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((n.dot(&v.coords) - offset).abs() < 1e-12);
        }
        for t in 0..mesh.triangles.len() {
            let angle = mesh.face_normal(t).dot(&n).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle <= 2.0, "{angle}");
        }
        for t in &mesh.triangles {
            assert!(t.iter().all(|&i| (i as usize) < mesh.vertices.len()));
        }
    }

    fn plane_views() -> (TsdfGrid, TsdfGrid) {
        let cam = CameraModel::new(140.0, 140.0, 79.5, 59.5, 160, 120).unwrap();
        let (mut seq, mut par) = (grid(), grid());
        for k in 0..5 {
            let c = Vec3::new(0.05 * (k as f64 - 2.0), 0.03 * ((k % 2) as f64), 0.1 * k as f64 / 4.0);
            let mut depth = DepthMap::invalid(160, 120);
            depth.depth.data_mut().fill(2.0 - c.z);
            depth.valid.data_mut().fill(true);
            let pose = Pose::new(nalgebra::UnitQuaternion::identity(), c);
            seq.integrate_depth_map(&depth, None, &pose, &cam, Exec::Sequential);
            par.integrate_depth_map(&depth, None, &pose, &cam, Exec::Parallel);
        }
        (seq, par)
    }

    #[test]
    fn fused_plane_crosses_zero_at_its_depth() {
        let (g, par) = plane_views();
        assert_eq!(g, par);
        let mut columns = 0;
        for i in -20..20 {
            for j in -20..20 {
                for z in g.zero_crossings(2, i, j, 150..250) {
                    assert!((z - 2.0).abs() <= EPS, "({i},{j}) {z}");
                    columns += 1;
                }
            }
        }
        assert!(columns > 1000);
        let mesh = g.extract_mesh(Exec::Parallel);
        for t in 0..mesh.triangles.len() {
            let angle = mesh.face_normal(t).dot(&-Vec3::z()).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle <= 2.0, "{angle}");
        }
        assert!(mesh.triangles.len() > 10_000);
    }

    #[test]
    fn mesh_extraction_policies_agree() {
        let mut g = grid();
        g.fill_sdf(&Vec3::repeat(-0.3), &Vec3::repeat(0.3), |p| p.norm() - 0.2);
        assert_eq!(g.extract_mesh(Exec::Sequential), g.extract_mesh(Exec::Parallel));
    }

    #[test]
    fn dump_round_trips() {
        let mut g = grid();
        g.fill_sdf(&Vec3::repeat(-0.1), &Vec3::repeat(0.1), |p| p.norm() - 0.05);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.bin");
        g.write_dump(&path).unwrap();
        let back = TsdfGrid::read_dump(&path).unwrap();
        assert_eq!(back.block_count(), g.block_count());
        assert_eq!(back.voxel_size(), g.voxel_size());
        for k in g.block_keys() {
            for i in 0..BLOCK_VOXELS {
                let v = join(*k, i);
                assert_eq!(g.get(v).map(|x| x.d as f32), back.get(v).map(|x| x.d as f32));
            }
        }
    }

    proptest! {
        #[test]
        fn fusion_order_does_not_matter_below_the_cap(obs in prop::collection::vec((-0.1..0.1f64, 0.01..2.0f64), 1..20), seed in 0u64..1000) {
            let apply = |order: &[(f64, f64)]| order.iter().fold(TsdfVoxel::default(), |v, (d, w)| update_voxel(v, *d, *w, 1e9, 0.04, 0.0));
            let mut shuffled = obs.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (a, b) = (apply(&obs), apply(&shuffled));
            prop_assert!((a.d - b.d).abs() <= 1e-9);
        }

        #[test]
        fn weights_never_decrease_and_d_stays_truncated(obs in prop::collection::vec((-1.0..1.0f64, 0.0..50.0f64), 1..40)) {
            let mut v = TsdfVoxel::default();
            for (d, w) in obs {
                let next = update_voxel(v, d, w, 100.0, 0.04, 0.5);
                prop_assert!(next.w >= v.w && next.w <= 100.0);
                prop_assert!(next.d.abs() <= 0.04 + 1e-15);
                v = next;
            }
        }
    }
}
