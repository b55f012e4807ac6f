//! Readers and writers for the on-disk formats.
//!
//! Text formats reject malformed or out-of-order records with the offending
//! line number.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Point3, UnitQuaternion, Quaternion};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, Distortion};
use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity};
use crate::geometry::{Pose, Vec3};
use crate::image::{DepthMap, Grid, ImageF, IntensityImage};
use crate::sim::imu::ImuSample;

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn fields<const N: usize>(path: &Path, line: usize, text: &str, sep: Option<char>) -> Result<[f64; N]> {
    let parts: Vec<&str> = match sep {
        Some(c) => text.split(c).map(str::trim).collect(),
        None => text.split_whitespace().collect(),
    };
    if parts.len() != N {
        return Err(parse_err(path, line, format!("expected {N} fields, found {}", parts.len())));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .parse::<f64>()
            .map_err(|_| parse_err(path, line, format!("not a number: '{p}'")))?;
        if !o.is_finite() {
            return Err(parse_err(path, line, format!("non-finite value '{p}'")));
        }
    }
    Ok(out)
}

fn check_monotone(path: &Path, line: usize, prev: Option<f64>, t: f64, strict: bool) -> Result<()> {
    if let Some(p) = prev {
        if t < p || (strict && t == p) {
            return Err(parse_err(path, line, format!("timestamp {t} does not follow {p}")));
        }
    }
    Ok(())
}

/// `t u v p` records with `p ∈ {0, 1}`.
pub fn read_events(path: &Path, width: usize, height: usize) -> Result<EventStream> {
    let text = read_text(path)?;
    let mut events = Vec::new();
    let mut prev = None;
    for (line, rec) in records(&text) {
        let [t, u, v, p] = fields::<4>(path, line, rec, None)?;
        check_monotone(path, line, prev, t, false)?;
        prev = Some(t);
        if u < 0.0 || v < 0.0 || u.fract() != 0.0 || v.fract() != 0.0 || u >= width as f64 || v >= height as f64 {
            return Err(parse_err(path, line, format!("pixel ({u}, {v}) outside {width}x{height}")));
        }
        let polarity = match p as i64 {
            1 => Polarity::Positive,
            0 | -1 => Polarity::Negative,
            _ => return Err(parse_err(path, line, format!("polarity must be 0 or 1, found {p}"))),
        };
        events.push(Event::new(t, u as u16, v as u16, polarity));
    }
    EventStream::new(events, width, height)
}

pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    let mut s = String::with_capacity(stream.len() * 24);
    for e in stream.events() {
        let p = u8::from(e.polarity == Polarity::Positive);
        let _ = writeln!(s, "{:.9} {} {} {}", e.t, e.x, e.y, p);
    }
    write_bytes(path, s.as_bytes())
}

/// Flat `key = value` calibration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(default)]
    k1: f64,
    #[serde(default)]
    k2: f64,
    #[serde(default)]
    p1: f64,
    #[serde(default)]
    p2: f64,
    width: usize,
    height: usize,
    /// `T_b_e` rotation as `qx qy qz qw`.
    #[serde(default = "identity_quaternion")]
    t_b_e_q: [f64; 4],
    #[serde(default)]
    t_b_e_t: [f64; 3],
}

fn identity_quaternion() -> [f64; 4] {
    [0.0, 0.0, 0.0, 1.0]
}

/// Reads intrinsics, distortion and the body-to-event-camera extrinsic `T_b_e`.
pub fn read_calibration(path: &Path) -> Result<(CameraModel, Pose)> {
    let text = read_text(path)?;
    let c: CalibrationFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let camera = CameraModel::with_distortion(
        c.fx,
        c.fy,
        c.cx,
        c.cy,
        Distortion {
            k1: c.k1,
            k2: c.k2,
            p1: c.p1,
            p2: c.p2,
        },
        c.width,
        c.height,
    )?;
    let n: f64 = c.t_b_e_q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.5 && n < 1.5) {
        return Err(Error::Config(format!("{}: extrinsic quaternion is not normalised", path.display())));
    }
    Ok((camera, Pose::from_quaternion_xyzw(c.t_b_e_q, Vec3::from(c.t_b_e_t))))
}

pub fn write_calibration(path: &Path, camera: &CameraModel, extrinsic: &Pose) -> Result<()> {
    let c = CalibrationFile {
        fx: camera.fx,
        fy: camera.fy,
        cx: camera.cx,
        cy: camera.cy,
        k1: camera.distortion.k1,
        k2: camera.distortion.k2,
        p1: camera.distortion.p1,
        p2: camera.distortion.p2,
        width: camera.width,
        height: camera.height,
        t_b_e_q: extrinsic.quaternion_xyzw(),
        t_b_e_t: extrinsic.translation.into(),
    };
    let text = toml::to_string(&c).map_err(|e| Error::Config(e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

/// `t,gx,gy,gz,ax,ay,az` with an optional header line.
pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let text = read_text(path)?;
    let mut out: Vec<ImuSample> = Vec::new();
    for (line, rec) in records(&text) {
        if line == 1 && rec.starts_with(|c: char| c.is_ascii_alphabetic()) {
            continue;
        }
        let [t, gx, gy, gz, ax, ay, az] = fields::<7>(path, line, rec, Some(','))?;
        check_monotone(path, line, out.last().map(|s| s.t), t, true)?;
        out.push(ImuSample {
            t,
            gyro: Vec3::new(gx, gy, gz),
            accel: Vec3::new(ax, ay, az),
        });
    }
    Ok(out)
}

pub fn write_imu(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut s = String::from("t,gx,gy,gz,ax,ay,az\n");
    for m in samples {
        let _ = writeln!(
            s,
            "{:.9},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}",
            m.t, m.gyro.x, m.gyro.y, m.gyro.z, m.accel.x, m.accel.y, m.accel.z
        );
    }
    write_bytes(path, s.as_bytes())
}

/// TUM trajectory: `t x y z qx qy qz qw`.
pub fn read_tum(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = read_text(path)?;
    let mut out: Vec<(f64, Pose)> = Vec::new();
    for (line, rec) in records(&text) {
        let [t, x, y, z, qx, qy, qz, qw] = fields::<8>(path, line, rec, None)?;
        check_monotone(path, line, out.last().map(|p| p.0), t, true)?;
        let q = Quaternion::new(qw, qx, qy, qz);
        if q.norm() < 1e-6 {
            return Err(parse_err(path, line, "zero quaternion"));
        }
        out.push((t, Pose::new(UnitQuaternion::from_quaternion(q), Vec3::new(x, y, z))));
    }
    Ok(out)
}

pub fn format_tum(poses: &[(f64, Pose)]) -> String {
    let mut s = String::new();
    for (t, p) in poses {
        let q = p.quaternion_xyzw();
        let _ = writeln!(
            s,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            t, p.translation.x, p.translation.y, p.translation.z, q[0], q[1], q[2], q[3]
        );
    }
    s
}

pub fn write_tum(path: &Path, poses: &[(f64, Pose)]) -> Result<()> {
    write_bytes(path, format_tum(poses).as_bytes())
}

/// `t,index` image index.
pub fn read_image_index(path: &Path) -> Result<Vec<(f64, usize)>> {
    let text = read_text(path)?;
    let mut out: Vec<(f64, usize)> = Vec::new();
    for (line, rec) in records(&text) {
        if line == 1 && rec.starts_with(|c: char| c.is_ascii_alphabetic()) {
            continue;
        }
        let [t, idx] = fields::<2>(path, line, rec, Some(','))?;
        check_monotone(path, line, out.last().map(|p| p.0), t, true)?;
        if idx < 0.0 || idx.fract() != 0.0 {
            return Err(parse_err(path, line, format!("bad image index {idx}")));
        }
        out.push((t, idx as usize));
    }
    Ok(out)
}

pub fn write_image_index(path: &Path, entries: &[(f64, usize)]) -> Result<()> {
    let mut s = String::from("t,index\n");
    for (t, i) in entries {
        let _ = writeln!(s, "{t:.9},{i}");
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_png_gray(path: &Path) -> Result<IntensityImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let gray = img.to_luma8();
    Ok(IntensityImage::from_u8(gray.width() as usize, gray.height() as usize, gray.as_raw()))
}

pub fn write_png_gray(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, data).ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        msg: "buffer size does not match dimensions".into(),
    })?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_png_rgb(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let buf = image::RgbImage::from_raw(width as u32, height as u32, data).ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        msg: "buffer size does not match dimensions".into(),
    })?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Little-endian single-channel PFM; invalid depths are stored as 0.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            let v = depth.get(x, y).unwrap_or(0.0) as f32;
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &bytes)
}

/// Reads a PFM written by [`write_pfm`]; zero and non-finite values are invalid.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| parse_err(path, 0, msg);
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        header.push(String::from_utf8_lossy(&bytes[pos..pos + end]).trim().to_string());
        pos += end + 1;
    }
    if header[0] != "Pf" {
        return Err(bad("only single-channel PFM is supported"));
    }
    let dims: Vec<usize> = header[1].split_whitespace().filter_map(|s| s.parse().ok()).collect();
    if dims.len() != 2 {
        return Err(bad("bad dimensions"));
    }
    let scale: f64 = header[2].parse().map_err(|_| bad("bad scale"))?;
    let (w, h) = (dims[0], dims[1]);
    if bytes.len() < pos + w * h * 4 {
        return Err(bad("truncated data"));
    }
    let mut depth = DepthMap::invalid(w, h);
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            let o = pos + (row * w + x) * 4;
            let raw = [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
            let v = if scale < 0.0 {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            } as f64;
            if v.is_finite() && v > 0.0 {
                depth.depth.set(x, y, v);
                depth.valid.set(x, y, true);
            }
        }
    }
    Ok(depth)
}

/// Coloured point cloud as ASCII PLY.
pub fn write_point_cloud_ply(path: &Path, points: &[(Point3<f64>, [u8; 3])]) -> Result<()> {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    for (p, c) in points {
        let _ = writeln!(s, "{:.6} {:.6} {:.6} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2]);
    }
    write_bytes(path, s.as_bytes())
}

/// Triangle mesh with per-vertex normals and grey levels as binary little-endian PLY.
pub fn write_mesh_ply(
    path: &Path,
    vertices: &[Point3<f64>],
    normals: &[Vec3],
    grey: &[u8],
    triangles: &[[u32; 3]],
) -> Result<()> {
    if normals.len() != vertices.len() || grey.len() != vertices.len() {
        return Err(Error::param("mesh attribute arrays differ in length"));
    }
    let mut buf = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        vertices.len(),
        triangles.len()
    )
    .into_bytes();
    for ((v, n), g) in vertices.iter().zip(normals).zip(grey) {
        for c in [v.x, v.y, v.z, n.x, n.y, n.z] {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        buf.extend_from_slice(&[*g, *g, *g]);
    }
    for t in triangles {
        buf.push(3);
        for i in t {
            buf.extend_from_slice(&(*i as i32).to_le_bytes());
        }
    }
    write_bytes(path, &buf)
}

/// Triangle mesh as Wavefront OBJ.
pub fn write_mesh_obj(path: &Path, vertices: &[Point3<f64>], normals: &[Vec3], triangles: &[[u32; 3]]) -> Result<()> {
    let mut s = String::new();
    for v in vertices {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z);
    }
    for n in normals {
        let _ = writeln!(s, "vn {:.6} {:.6} {:.6}", n.x, n.y, n.z);
    }
    for t in triangles {
        let _ = writeln!(
            s,
            "f {a}//{a} {b}//{b} {c}//{c}",
            a = t[0] + 1,
            b = t[1] + 1,
            c = t[2] + 1
        );
    }
    write_bytes(path, s.as_bytes())
}

/// 8-bit rendering of a validity mask (255 valid).
pub fn write_mask_png(path: &Path, mask: &Grid<bool>) -> Result<()> {
    write_png_gray(
        path,
        mask.width(),
        mask.height(),
        mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect(),
    )
}

/// Normalised 8-bit rendering of a scalar image.
pub fn write_scalar_png(path: &Path, img: &ImageF) -> Result<()> {
    let (lo, hi) = img
        .data()
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    write_png_gray(
        path,
        img.width(),
        img.height(),
        img.data()
            .iter()
            .map(|&v| if v.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect(),
    )
}
