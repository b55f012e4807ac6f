//! Fast-marching distance map and weighted depth inpainting.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::segment::SegmentationMap;
use super::{DenseDepthMap, Provenance};
use crate::image::{DepthMap, Grid, ImageF};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarchState {
    Known,
    Band,
    Unknown,
}

/// Distance `T` to the known pixels, measured inside each segment.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    /// `T(p)` in pixels; infinite where unreachable.
    pub t: ImageF,
    pub state: Grid<MarchState>,
    /// Unit `∇T` per pixel (zero where undefined).
    pub normal: Grid<Vector2<f64>>,
    /// Pixels in the order they were finalised.
    pub order: Vec<(usize, usize)>,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NEIGHBOURS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// Upwind solution of `‖∇T‖ = 1` from the two smallest axis neighbours.
fn eikonal(a: f64, b: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if hi.is_infinite() || hi - lo >= 1.0 {
        lo + 1.0
    } else {
        0.5 * (a + b + (2.0 - (a - b) * (a - b)).sqrt())
    }
}

/// Marches from the pixels of `known` outwards, never crossing a segment boundary.
pub fn distance_map(known: &Grid<bool>, seg: &SegmentationMap) -> DistanceMap {
    let (w, h) = (known.width(), known.height());
    let mut t = ImageF::new(w, h, f64::INFINITY);
    let mut state = Grid::new(w, h, MarchState::Unknown);
    let mut heap = BinaryHeap::new();
    let mut order = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if known.at(x, y) {
                t.set(x, y, 0.0);
                state.set(x, y, MarchState::Known);
                order.push((x, y));
            }
        }
    }
    let same = |x: usize, y: usize, nx: i64, ny: i64| -> Option<(usize, usize)> {
        (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && seg.label(nx as usize, ny as usize) == seg.label(x, y)).then_some((nx as usize, ny as usize))
    };
    let solve = |t: &ImageF, state: &Grid<MarchState>, x: usize, y: usize| {
        let axis = |d: [(i64, i64); 2]| {
            d.iter()
                .filter_map(|(dx, dy)| same(x, y, x as i64 + dx, y as i64 + dy))
                .filter(|&(nx, ny)| state.at(nx, ny) == MarchState::Known)
                .map(|(nx, ny)| t.at(nx, ny))
                .fold(f64::INFINITY, f64::min)
        };
        eikonal(axis([(1, 0), (-1, 0)]), axis([(0, 1), (0, -1)]))
    };
    let push_neighbours = |x: usize, y: usize, t: &mut ImageF, state: &mut Grid<MarchState>, heap: &mut BinaryHeap<Entry>| {
        for (dx, dy) in NEIGHBOURS {
            let Some((nx, ny)) = same(x, y, x as i64 + dx, y as i64 + dy) else {
                continue;
            };
            if state.at(nx, ny) == MarchState::Known {
                continue;
            }
            let v = solve(t, state, nx, ny);
            if v < t.at(nx, ny) {
                t.set(nx, ny, v);
                state.set(nx, ny, MarchState::Band);
                heap.push(Entry(v, ny * w + nx));
            }
        }
    };
    for &(x, y) in order.clone().iter() {
        push_neighbours(x, y, &mut t, &mut state, &mut heap);
    }
    while let Some(Entry(v, i)) = heap.pop() {
        let (x, y) = (i % w, i / w);
        if state.at(x, y) == MarchState::Known || v > t.at(x, y) {
            continue;
        }
        state.set(x, y, MarchState::Known);
        order.push((x, y));
        push_neighbours(x, y, &mut t, &mut state, &mut heap);
    }

    let mut normal = Grid::new(w, h, Vector2::zeros());
    for y in 0..h {
        for x in 0..w {
            let tc = t.at(x, y);
            if !tc.is_finite() {
                continue;
            }
            let grad = |d: (i64, i64)| {
                let f = same(x, y, x as i64 + d.0, y as i64 + d.1).map(|(a, b)| t.at(a, b)).filter(|v| v.is_finite());
                let b = same(x, y, x as i64 - d.0, y as i64 - d.1).map(|(a, b)| t.at(a, b)).filter(|v| v.is_finite());
                match (f, b) {
                    (Some(f), Some(b)) => 0.5 * (f - b),
                    (Some(f), None) => f - tc,
                    (None, Some(b)) => tc - b,
                    (None, None) => 0.0,
                }
            };
            let g = Vector2::new(grad((1, 0)), grad((0, 1)));
            if g.norm() > 1e-12 {
                normal.set(x, y, g.normalize());
            }
        }
    }
    DistanceMap { t, state, normal, order }
}

/// Lower bound on the direction term so tangential pairs keep a small weight.
pub const MIN_DIRECTION_WEIGHT: f64 = 0.01;

/// `|ω_dir · ω_dst · ω_lev · ω_img|` for filling `p` from `q`.
pub fn compute_weight(p: (usize, usize), q: (usize, usize), dist: &DistanceMap, image: &ImageF) -> f64 {
    let d = Vector2::new(p.0 as f64 - q.0 as f64, p.1 as f64 - q.1 as f64);
    let r2 = d.norm_squared();
    if r2 == 0.0 {
        return 0.0;
    }
    let dir = (d / r2.sqrt()).dot(&dist.normal.at(p.0, p.1)).abs().max(MIN_DIRECTION_WEIGHT);
    let dst = 1.0 / r2;
    let lev = 1.0 / (1.0 + (dist.t.at(p.0, p.1) - dist.t.at(q.0, q.1)).abs());
    let di = image.at(p.0, p.1) - image.at(q.0, q.1);
    let img = (-0.5 * di * di).exp();
    (dir * dst * lev * img).abs()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InpaintReport {
    pub segments: usize,
    /// Segments left empty because they carry too few seeds.
    pub unseeded_segments: usize,
    pub filled: usize,
    /// Pixels that had to be re-queued once.
    pub deferred: usize,
    /// Pixels left invalid inside seeded segments.
    pub failed: usize,
}

/// Fills the holes of `semi` in order of increasing `T`, each pixel from the
/// known or already filled pixels of its own segment within `eps_radius`.
/// Segments with fewer than `min_seed_fraction` of their area seeded stay empty.
pub fn inpaint_depth(
    semi: &DepthMap,
    image: &ImageF,
    seg: &SegmentationMap,
    eps_radius: usize,
    min_seed_fraction: f64,
) -> (DenseDepthMap, DistanceMap, InpaintReport) {
    let (w, h) = (semi.width(), semi.height());
    let sizes = seg.sizes();
    let mut seeds = vec![0usize; seg.count];
    for y in 0..h {
        for x in 0..w {
            if semi.valid.at(x, y) {
                seeds[seg.label(x, y) as usize] += 1;
            }
        }
    }
    let seeded: Vec<bool> = (0..seg.count)
        .map(|s| seeds[s] > 0 && seeds[s] as f64 >= min_seed_fraction * sizes[s] as f64)
        .collect();
    let known = Grid::from_fn(w, h, |x, y| semi.valid.at(x, y) && seeded[seg.label(x, y) as usize]);
    let dist = distance_map(&known, seg);

    let mut out = DenseDepthMap {
        depth: semi.clone(),
        provenance: Grid::from_fn(w, h, |x, y| if semi.valid.at(x, y) { Provenance::Measured } else { Provenance::Missing }),
    };
    let mut report = InpaintReport {
        segments: seg.count,
        unseeded_segments: seeded.iter().filter(|s| !**s).count(),
        ..Default::default()
    };
    let r = eps_radius as i64;
    let fill = |out: &DenseDepthMap, x: usize, y: usize| -> Option<f64> {
        let label = seg.label(x, y);
        let (mut wsum, mut acc, mut reference) = (0.0, 0.0, None);
        for qy in (y as i64 - r).max(0)..=(y as i64 + r).min(h as i64 - 1) {
            for qx in (x as i64 - r).max(0)..=(x as i64 + r).min(w as i64 - 1) {
                let (dx, dy) = (qx - x as i64, qy - y as i64);
                if dx * dx + dy * dy > r * r || (dx, dy) == (0, 0) {
                    continue;
                }
                let q = (qx as usize, qy as usize);
                if seg.label(q.0, q.1) != label {
                    continue;
                }
                let Some(d) = out.depth.get(q.0, q.1) else {
                    continue;
                };
                let wgt = compute_weight((x, y), q, &dist, image);
                // Accumulating offsets from one member keeps constant fills exact.
                let base = *reference.get_or_insert(d);
                wsum += wgt;
                acc += wgt * (d - base);
            }
        }
        let base = reference?;
        (wsum > 0.0).then(|| base + acc / wsum)
    };
    let mut deferred = Vec::new();
    for &(x, y) in &dist.order {
        if out.provenance.at(x, y) != Provenance::Missing {
            continue;
        }
        match fill(&out, x, y) {
            Some(d) => {
                out.depth.depth.set(x, y, d);
                out.depth.valid.set(x, y, true);
                out.provenance.set(x, y, Provenance::Inpainted);
                report.filled += 1;
            }
            None => deferred.push((x, y)),
        }
    }
    report.deferred = deferred.len();
    for (x, y) in deferred {
        if let Some(d) = fill(&out, x, y) {
            out.depth.depth.set(x, y, d);
            out.depth.valid.set(x, y, true);
            out.provenance.set(x, y, Provenance::Inpainted);
            report.filled += 1;
        } else {
            report.failed += 1;
        }
    }
    (out, dist, report)
}
