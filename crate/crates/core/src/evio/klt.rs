//! Pyramidal Lucas-Kanade feature tracking with a forward-backward check.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::camera::Pixel;
use crate::events::TimeSurface;
use crate::image::{pyramid, ImageF};
use crate::par::{self, Exec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KltOptions {
    pub half_window: usize,
    pub levels: usize,
    pub max_iterations: usize,
    /// Update norm (pixels) that ends the iteration at a level.
    pub epsilon: f64,
    /// Maximum forward-backward round-trip error in pixels.
    pub fb_threshold: f64,
    /// Tracks closer than this to the border are dropped.
    pub border: f64,
    pub min_eigenvalue: f64,
}

impl Default for KltOptions {
    fn default() -> Self {
        Self {
            half_window: 7,
            levels: 3,
            max_iterations: 30,
            epsilon: 0.01,
            fb_threshold: 1.0,
            border: 2.0,
            min_eigenvalue: 1e-6,
        }
    }
}

/// Precomputed image pyramid with gradients.
pub struct TrackPyramid {
    levels: Vec<(ImageF, ImageF, ImageF)>,
}

impl TrackPyramid {
    pub fn new(img: &ImageF, levels: usize) -> Self {
        Self {
            levels: pyramid(img, levels)
                .into_iter()
                .map(|l| {
                    let (gx, gy) = crate::image::central_gradients(&l);
                    (l, gx, gy)
                })
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.levels[0].0.width()
    }

    pub fn height(&self) -> usize {
        self.levels[0].0.height()
    }
}

fn inside(img: &ImageF, p: &Pixel, border: f64) -> bool {
    p.x >= border && p.y >= border && p.x <= img.width() as f64 - 1.0 - border && p.y <= img.height() as f64 - 1.0 - border
}

/// Tracks one point from `prev` to `cur`, `None` on failure.
fn track_one(prev: &TrackPyramid, cur: &TrackPyramid, p0: &Pixel, guess: &Pixel, opts: &KltOptions) -> Option<Pixel> {
    let nlev = prev.levels.len().min(cur.levels.len());
    let hw = opts.half_window as i64;
    let mut d = (guess - p0) / (1u64 << (nlev - 1)) as f64;
    for level in (0..nlev).rev() {
        let scale = (1u64 << level) as f64;
        let (pi, pgx, pgy) = &prev.levels[level];
        let (ci, _, _) = &cur.levels[level];
        let p = Pixel::new((p0.x + 0.5) / scale - 0.5, (p0.y + 0.5) / scale - 0.5);
        let mut g = Matrix2::zeros();
        let mut patch = Vec::with_capacity(((2 * hw + 1) * (2 * hw + 1)) as usize);
        for dy in -hw..=hw {
            for dx in -hw..=hw {
                let (x, y) = (p.x + dx as f64, p.y + dy as f64);
                let ix = pgx.sample_bilinear_clamped(x, y).unwrap_or(0.0);
                let iy = pgy.sample_bilinear_clamped(x, y).unwrap_or(0.0);
                let v = pi.sample_bilinear_clamped(x, y).unwrap_or(0.0);
                g += Matrix2::new(ix * ix, ix * iy, ix * iy, iy * iy);
                patch.push((dx as f64, dy as f64, v, ix, iy));
            }
        }
        let tr = g.trace();
        let det = g.determinant();
        let min_eig = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
        if min_eig / patch.len() as f64 <= opts.min_eigenvalue {
            return None;
        }
        let ginv = g.try_inverse()?;
        for _ in 0..opts.max_iterations {
            let mut b = Vector2::zeros();
            for &(dx, dy, v, ix, iy) in &patch {
                let c = ci.sample_bilinear(p.x + d.x + dx, p.y + d.y + dy);
                let e = v - c;
                b += Vector2::new(ix * e, iy * e);
            }
            let step = ginv * b;
            d += step;
            if !d.iter().all(|v| v.is_finite()) || d.norm() > 4.0 * ci.width().max(ci.height()) as f64 {
                return None;
            }
            if step.norm() < opts.epsilon {
                break;
            }
        }
        if level > 0 {
            d *= 2.0;
        }
    }
    let out = p0 + d;
    inside(&cur.levels[0].0, &out, opts.border).then_some(out)
}

/// Tracks `features` and reports `(position, tracked)` for each.
pub fn track_pyramids(
    prev: &TrackPyramid,
    cur: &TrackPyramid,
    features: &[Pixel],
    opts: &KltOptions,
    exec: Exec,
) -> Vec<(Pixel, bool)> {
    par::map_slice(exec, features, |p| {
        if !inside(&prev.levels[0].0, p, opts.border) {
            return (*p, false);
        }
        let Some(fwd) = track_one(prev, cur, p, p, opts) else {
            return (*p, false);
        };
        let Some(back) = track_one(cur, prev, &fwd, p, opts) else {
            return (fwd, false);
        };
        (fwd, (back - p).norm() <= opts.fb_threshold)
    })
}

/// Tracks on raw images.
pub fn track_images(prev: &ImageF, cur: &ImageF, features: &[Pixel], opts: &KltOptions, exec: Exec) -> Vec<(Pixel, bool)> {
    let a = TrackPyramid::new(prev, opts.levels);
    let b = TrackPyramid::new(cur, opts.levels);
    track_pyramids(&a, &b, features, opts, exec)
}

/// Tracks event corners on `|TS|`.
pub fn track_features(ts_prev: &TimeSurface, ts_cur: &TimeSurface, features: &[Pixel], opts: &KltOptions) -> Vec<(Pixel, bool)> {
    track_images(&ts_prev.magnitude(), &ts_cur.magnitude(), features, opts, Exec::default())
}
