//! Corner detection on time surfaces (Harris) and intensity frames (Shi-Tomasi).

use serde::{Deserialize, Serialize};

use crate::camera::Pixel;
use crate::events::TimeSurface;
use crate::image::{gaussian_blur, sobel, ImageF};
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CornerOptions {
    /// Non-maximum suppression radius in pixels, also applied around existing features.
    pub nms_radius: f64,
    /// Responses below `quality · max response` are discarded.
    pub quality: f64,
    /// Pixels closer than this to the border are never returned.
    pub border: usize,
    pub harris_k: f64,
    /// Structure-tensor integration scale.
    pub window_sigma: f64,
}

impl Default for CornerOptions {
    fn default() -> Self {
        Self {
            nms_radius: 10.0,
            quality: 0.01,
            border: 4,
            harris_k: 0.04,
            window_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Harris,
    ShiTomasi,
}

/// Per-pixel corner response of a smoothed structure tensor.
pub fn corner_response(img: &ImageF, kind: Response, opts: &CornerOptions) -> ImageF {
    let (gx, gy) = sobel(img);
    let (w, h) = (img.width(), img.height());
    let mut xx = ImageF::new(w, h, 0.0);
    let mut xy = ImageF::new(w, h, 0.0);
    let mut yy = ImageF::new(w, h, 0.0);
    for i in 0..w * h {
        let (a, b) = (gx.data()[i] / 8.0, gy.data()[i] / 8.0);
        xx.data_mut()[i] = a * a;
        xy.data_mut()[i] = a * b;
        yy.data_mut()[i] = b * b;
    }
    let xx = gaussian_blur(&xx, opts.window_sigma, Exec::Sequential);
    let xy = gaussian_blur(&xy, opts.window_sigma, Exec::Sequential);
    let yy = gaussian_blur(&yy, opts.window_sigma, Exec::Sequential);
    ImageF::from_fn(w, h, |x, y| {
        let (a, b, c) = (xx.at(x, y), xy.at(x, y), yy.at(x, y));
        match kind {
            Response::Harris => a * c - b * b - opts.harris_k * (a + c) * (a + c),
            Response::ShiTomasi => 0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt(),
        }
    })
}

/// Greedy strongest-first selection of local maxima with a suppression radius.
pub fn select_corners(response: &ImageF, existing: &[Pixel], target_count: usize, opts: &CornerOptions) -> Vec<Pixel> {
    let (w, h) = (response.width(), response.height());
    let max = response.max_value();
    if target_count == 0 || !(max > 1e-12) {
        return Vec::new();
    }
    let floor = opts.quality * max;
    let b = opts.border.max(1);
    let mut candidates = Vec::new();
    for y in b..h.saturating_sub(b) {
        for x in b..w.saturating_sub(b) {
            let v = response.at(x, y);
            if v <= floor {
                continue;
            }
            let mut is_max = true;
            'n: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx != 0 || dy != 0) && response.at_clamped(x as i64 + dx, y as i64 + dy) > v {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                candidates.push((v, y * w + x));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let r2 = opts.nms_radius * opts.nms_radius;
    let mut taken: Vec<Pixel> = existing.to_vec();
    let mut out = Vec::new();
    for (_, idx) in candidates {
        let p = Pixel::new((idx % w) as f64, (idx / w) as f64);
        if taken.iter().any(|q| (q - p).norm_squared() < r2) {
            continue;
        }
        taken.push(p);
        out.push(p);
        if out.len() >= target_count {
            break;
        }
    }
    out
}

/// Harris corners on `|TS|`, avoiding the neighbourhoods of `existing` features.
pub fn detect_event_corners(ts: &TimeSurface, existing: &[Pixel], target_count: usize, opts: &CornerOptions) -> Vec<Pixel> {
    let response = corner_response(&ts.magnitude(), Response::Harris, opts);
    select_corners(&response, existing, target_count, opts)
}

/// Shi-Tomasi corners on an intensity frame.
pub fn detect_image_corners(img: &ImageF, existing: &[Pixel], target_count: usize, opts: &CornerOptions) -> Vec<Pixel> {
    let response = corner_response(img, Response::ShiTomasi, opts);
    select_corners(&response, existing, target_count, opts)
}
