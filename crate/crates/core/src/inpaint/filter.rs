//! Edge-preserving smoothing of inpainted depth.

use super::{DenseDepthMap, Provenance};
use crate::image::ImageF;
use crate::par::{for_each_row, Exec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOptions {
    pub spatial_sigma: f64,
    /// Range sigma as a fraction of the valid depth range.
    pub range_fraction: f64,
    /// NLM patch side (odd).
    pub patch: usize,
    /// NLM search window side (odd).
    pub search: usize,
    /// NLM strength as a fraction of the valid depth range.
    pub nlm_fraction: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            spatial_sigma: 3.0,
            range_fraction: 0.05,
            patch: 5,
            search: 11,
            nlm_fraction: 0.03,
        }
    }
}

fn depth_range(dense: &DenseDepthMap) -> f64 {
    let (lo, hi) = dense
        .depth
        .depth
        .data()
        .iter()
        .zip(dense.depth.valid.data())
        .filter(|(_, v)| **v)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (d, _)| (lo.min(*d), hi.max(*d)));
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

/// Bilateral filter whose range term is centred on the window median, so an
/// isolated outlier cannot anchor its own neighbourhood.
pub fn bilateral(dense: &DenseDepthMap, opts: &FilterOptions, exec: Exec) -> ImageF {
    let (w, h) = (dense.depth.width(), dense.depth.height());
    let sigma_r = opts.range_fraction * depth_range(dense);
    let r = (2.0 * opts.spatial_sigma).ceil() as i64;
    let mut out = dense.depth.depth.clone();
    if sigma_r <= 0.0 {
        return out;
    }
    for_each_row(exec, out.data_mut(), w, |y, row| {
        let mut window = Vec::new();
        for (x, v) in row.iter_mut().enumerate() {
            if dense.provenance.at(x, y) != Provenance::Inpainted {
                continue;
            }
            window.clear();
            for qy in (y as i64 - r).max(0)..=(y as i64 + r).min(h as i64 - 1) {
                for qx in (x as i64 - r).max(0)..=(x as i64 + r).min(w as i64 - 1) {
                    if let Some(d) = dense.depth.get(qx as usize, qy as usize) {
                        let s2 = ((qx - x as i64).pow(2) + (qy - y as i64).pow(2)) as f64;
                        window.push((d, s2));
                    }
                }
            }
            let mut sorted: Vec<f64> = window.iter().map(|p| p.0).collect();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            let (mut num, mut den) = (0.0, 0.0);
            for &(d, s2) in &window {
                let wgt = (-s2 / (2.0 * opts.spatial_sigma.powi(2)) - (d - median).powi(2) / (2.0 * sigma_r * sigma_r)).exp();
                num += wgt * d;
                den += wgt;
            }
            if den > 0.0 {
                *v = num / den;
            }
        }
    });
    out
}

/// Non-local means over valid pixels, writing only inpainted pixels.
pub fn non_local_means(dense: &DenseDepthMap, opts: &FilterOptions, exec: Exec) -> ImageF {
    let (w, h) = (dense.depth.width(), dense.depth.height());
    let hh = opts.nlm_fraction * depth_range(dense);
    let mut out = dense.depth.depth.clone();
    if hh <= 0.0 {
        return out;
    }
    let (pr, sr) = ((opts.patch / 2) as i64, (opts.search / 2) as i64);
    let valid = |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && dense.depth.valid.at(x as usize, y as usize);
    let val = |x: i64, y: i64| dense.depth.depth.at(x as usize, y as usize);
    for_each_row(exec, out.data_mut(), w, |y, row| {
        let y = y as i64;
        for (x, v) in row.iter_mut().enumerate() {
            let x = x as i64;
            if dense.provenance.at(x as usize, y as usize) != Provenance::Inpainted {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for qy in y - sr..=y + sr {
                for qx in x - sr..=x + sr {
                    if !valid(qx, qy) {
                        continue;
                    }
                    let (mut ssd, mut n) = (0.0, 0usize);
                    for dy in -pr..=pr {
                        for dx in -pr..=pr {
                            if valid(x + dx, y + dy) && valid(qx + dx, qy + dy) {
                                ssd += (val(x + dx, y + dy) - val(qx + dx, qy + dy)).powi(2);
                                n += 1;
                            }
                        }
                    }
                    let wgt = (-(ssd / n as f64) / (hh * hh)).exp();
                    num += wgt * val(qx, qy);
                    den += wgt;
                }
            }
            if den > 0.0 {
                *v = num / den;
            }
        }
    });
    out
}

/// Bilateral then non-local means on inpainted pixels; measured pixels are untouched.
pub fn filter_depth(dense: &DenseDepthMap, opts: &FilterOptions, exec: Exec) -> DenseDepthMap {
    let mut out = dense.clone();
    out.depth.depth = bilateral(dense, opts, exec);
    out.depth.depth = non_local_means(&out, opts, exec);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{DepthMap, Grid};

    fn all_inpainted(depth: ImageF) -> DenseDepthMap {
        let (w, h) = (depth.width(), depth.height());
        DenseDepthMap {
            depth: DepthMap {
                depth,
                valid: Grid::new(w, h, true),
            },
            provenance: Grid::new(w, h, Provenance::Inpainted),
        }
    }

    #[test]
    fn constant_map_is_unchanged() {
        let d = all_inpainted(ImageF::new(20, 15, 2.5));
        assert_eq!(filter_depth(&d, &FilterOptions::default(), Exec::Sequential), d);
    }

    #[test]
    fn salt_outlier_is_suppressed() {
        let smooth = |x: usize, y: usize| 2.0 + 0.01 * x as f64 + 0.005 * y as f64;
        let mut d = all_inpainted(ImageF::from_fn(30, 30, smooth));
        let base = smooth(15, 15);
        d.depth.depth.set(15, 15, 10.0 * base);
        let f = filter_depth(&d, &FilterOptions::default(), Exec::Sequential);
        let dev = (f.depth.depth.at(15, 15) - base).abs();
        assert!(dev < 0.1 * 10.0 * base, "{dev}");
    }

    #[test]
    fn step_edge_stays_sharp() {
        let mut d = all_inpainted(ImageF::from_fn(40, 20, |x, _| if x < 20 { 1.0 } else { 3.0 }));
        for y in 0..20 {
            for x in (0..40).step_by(5) {
                d.provenance.set(x, y, Provenance::Measured);
            }
        }
        let f = filter_depth(&d, &FilterOptions::default(), Exec::Sequential);
        for y in 0..20 {
            let blurred = (0..40).filter(|&x| {
                let v = f.depth.depth.at(x, y);
                v > 1.0 + 0.05 * 2.0 && v < 3.0 - 0.05 * 2.0
            });
            assert!(blurred.count() <= 2);
        }
    }

    #[test]
    fn measured_pixels_are_untouched() {
        let mut d = all_inpainted(ImageF::from_fn(20, 20, |x, y| 1.0 + ((x * 13 + y * 7) % 5) as f64 * 0.1));
        for i in 0..20 {
            d.provenance.set(i, i, Provenance::Measured);
        }
        let f = filter_depth(&d, &FilterOptions::default(), Exec::Sequential);
        for i in 0..20 {
            assert_eq!(f.depth.depth.at(i, i).to_bits(), d.depth.depth.at(i, i).to_bits());
        }
    }

    #[test]
    fn policies_agree() {
        let d = all_inpainted(ImageF::from_fn(24, 18, |x, y| 1.0 + ((x * 13 + y * 7) % 5) as f64 * 0.1));
        let o = FilterOptions::default();
        assert_eq!(filter_depth(&d, &o, Exec::Sequential), filter_depth(&d, &o, Exec::Parallel));
    }
}
