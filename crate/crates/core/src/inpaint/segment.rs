//! Region-growing segmentation of the intensity image.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::image::{Grid, ImageF};

/// Per-pixel segment labels in `0..count`, each segment 4-connected.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub labels: Grid<u32>,
    pub count: usize,
}

impl SegmentationMap {
    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels.at(x, y)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        for &l in self.labels.data() {
            s[l as usize] += 1;
        }
        s
    }
}

const NEIGHBOURS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// Flood fill from raster-scan seeds. A pixel joins the growing region when it
/// differs from the region's running mean by at most `tolerance`. Regions
/// smaller than `min_segment_px` are merged into the adjacent region with the
/// closest mean.
pub fn region_grow_segment(image: &ImageF, tolerance: f64, min_segment_px: usize) -> SegmentationMap {
    let (w, h) = (image.width(), image.height());
    let mut labels = Grid::new(w, h, u32::MAX);
    let mut stats: Vec<(usize, f64)> = Vec::new();
    let mut queue = VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            if labels.at(sx, sy) != u32::MAX {
                continue;
            }
            let id = stats.len() as u32;
            let (mut n, mut sum) = (1usize, image.at(sx, sy));
            labels.set(sx, sy, id);
            queue.push_back((sx, sy));
            while let Some((x, y)) = queue.pop_front() {
                for (dx, dy) in NEIGHBOURS {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if !labels.in_bounds(nx, ny) {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if labels.at(nx, ny) != u32::MAX {
                        continue;
                    }
                    let v = image.at(nx, ny);
                    if (v - sum / n as f64).abs() <= tolerance {
                        labels.set(nx, ny, id);
                        n += 1;
                        sum += v;
                        queue.push_back((nx, ny));
                    }
                }
            }
            stats.push((n, sum));
        }
    }
    if min_segment_px > 1 {
        merge_small(&mut labels, &mut stats, min_segment_px);
    }
    relabel(labels)
}

fn merge_small(labels: &mut Grid<u32>, stats: &mut [(usize, f64)], min_px: usize) {
    let (w, h) = (labels.width(), labels.height());
    let mut adjacency: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); stats.len()];
    for y in 0..h {
        for x in 0..w {
            let a = labels.at(x, y);
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx < w && ny < h {
                    let b = labels.at(nx, ny);
                    if a != b {
                        adjacency[a as usize].insert(b);
                        adjacency[b as usize].insert(a);
                    }
                }
            }
        }
    }
    // parent[i] is the segment `i` was merged into.
    let mut parent: Vec<u32> = (0..stats.len() as u32).collect();
    let mut small: BTreeSet<(usize, u32)> = stats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.0 < min_px)
        .map(|(i, s)| (s.0, i as u32))
        .collect();
    while let Some((size, id)) = small.pop_first() {
        let i = id as usize;
        let mean = stats[i].1 / size as f64;
        let Some(&target) = adjacency[i].iter().min_by(|&&a, &&b| {
            let da = (stats[a as usize].1 / stats[a as usize].0 as f64 - mean).abs();
            let db = (stats[b as usize].1 / stats[b as usize].0 as f64 - mean).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        }) else {
            continue;
        };
        let t = target as usize;
        let was_small = stats[t].0 < min_px;
        if was_small {
            small.remove(&(stats[t].0, target));
        }
        stats[t].0 += stats[i].0;
        stats[t].1 += stats[i].1;
        stats[i] = (0, 0.0);
        parent[i] = target;
        let neighbours = std::mem::take(&mut adjacency[i]);
        for n in neighbours {
            adjacency[n as usize].remove(&id);
            if n != target {
                adjacency[n as usize].insert(target);
                adjacency[t].insert(n);
            }
        }
        adjacency[t].remove(&target);
        if stats[t].0 < min_px {
            small.insert((stats[t].0, target));
        }
    }
    let root = |mut i: u32| {
        while parent[i as usize] != i {
            i = parent[i as usize];
        }
        i
    };
    let roots: Vec<u32> = (0..parent.len() as u32).map(root).collect();
    for l in labels.data_mut() {
        *l = roots[*l as usize];
    }
}

fn relabel(mut labels: Grid<u32>) -> SegmentationMap {
    let mut map = BTreeMap::new();
    for l in labels.data_mut() {
        let next = map.len() as u32;
        *l = *map.entry(*l).or_insert(next);
    }
    SegmentationMap { labels, count: map.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn is_connected(seg: &SegmentationMap) -> bool {
        let (w, h) = (seg.labels.width(), seg.labels.height());
        let mut seen = Grid::new(w, h, false);
        let mut components = 0;
        for y in 0..h {
            for x in 0..w {
                if seen.at(x, y) {
                    continue;
                }
                components += 1;
                let l = seg.label(x, y);
                let mut stack = vec![(x, y)];
                seen.set(x, y, true);
                while let Some((cx, cy)) = stack.pop() {
                    for (dx, dy) in NEIGHBOURS {
                        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                        if seen.in_bounds(nx, ny) && !seen.at(nx as usize, ny as usize) && seg.label(nx as usize, ny as usize) == l {
                            seen.set(nx as usize, ny as usize, true);
                            stack.push((nx as usize, ny as usize));
                        }
                    }
                }
            }
        }
        components == seg.count
    }

    #[test]
    fn uniform_image_is_one_segment() {
        let seg = region_grow_segment(&ImageF::new(40, 30, 0.5), 0.05, 10);
        assert_eq!(seg.count, 1);
    }

    #[test]
    fn two_tone_image_splits_at_the_edge() {
        let img = ImageF::from_fn(40, 30, |x, _| if x < 17 { 0.2 } else { 0.8 });
        let seg = region_grow_segment(&img, 0.05, 10);
        assert_eq!(seg.count, 2);
        for y in 0..30 {
            for x in 0..40 {
                assert_eq!(seg.label(x, y), u32::from(x >= 17));
            }
        }
    }

    /// Widths produced by growing along a 1-D sequence with a running mean.
    fn running_mean_widths(values: &[f64], tol: f64) -> Vec<usize> {
        let mut widths = Vec::new();
        let mut i = 0;
        while i < values.len() {
            let (mut n, mut sum) = (1usize, values[i]);
            let mut j = i + 1;
            while j < values.len() && (values[j] - sum / n as f64).abs() <= tol {
                sum += values[j];
                n += 1;
                j += 1;
            }
            widths.push(j - i);
            i = j;
        }
        widths
    }

    #[test]
    fn ramp_segments_match_running_mean_oracle() {
        let (slope, tol) = (0.004, 0.05);
        let img = ImageF::from_fn(300, 1, |x, _| x as f64 * slope);
        let seg = region_grow_segment(&img, tol, 1);
        let sizes = seg.sizes();
        let oracle = running_mean_widths(img.data(), tol);
        assert_eq!(sizes, oracle);
        // Interior segments are about 2τ/s wide.
        for s in &sizes[..sizes.len() - 1] {
            assert!((*s as f64 - 2.0 * tol / slope).abs() <= 2.0, "{s}");
        }
    }

    #[test]
    fn small_segments_merge_into_closest_neighbour() {
        // A 2×2 speck of 0.45 inside a 0.2 | 0.5 split.
        let img = ImageF::from_fn(20, 10, |x, y| {
            if (12..14).contains(&x) && (4..6).contains(&y) {
                0.45
            } else if x < 10 {
                0.2
            } else {
                0.5
            }
        });
        let seg = region_grow_segment(&img, 0.02, 5);
        assert_eq!(seg.count, 2);
        assert_eq!(seg.label(12, 4), seg.label(15, 4));
    }

    fn blocky(seed: u64, w: usize, h: usize) -> ImageF {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let levels: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        ImageF::from_fn(w, h, |x, y| levels[(x / 6 + 4 * (y / 5)) % 16])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn every_segment_is_connected(seed in 0u64..10_000, tol in 0.01..0.4f64, min_px in 1usize..40) {
            let seg = region_grow_segment(&blocky(seed, 30, 20), tol, min_px);
            prop_assert!(is_connected(&seg));
            prop_assert!(seg.labels.data().iter().all(|&l| (l as usize) < seg.count));
        }

        #[test]
        fn shrinking_tolerance_never_joins_segments(seed in 0u64..10_000, tol in 0.05..0.3f64, shrink in 0.25..1.0f64) {
            // Running-mean growth is only monotone when the level gaps are
            // either below the fine tolerance or above the coarse one, so the
            // images are drawn from clustered levels with that separation.
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let jitter = 0.5 * tol * shrink;
            let clusters: Vec<f64> = (0..4).map(|k| k as f64 * (tol + jitter) * 1.01).collect();
            let levels: Vec<f64> = (0..16).map(|_| clusters[rng.random_range(0..4)] + rng.random_range(0.0..jitter)).collect();
            let img = ImageF::from_fn(30, 20, |x, y| levels[(x / 6 + 4 * (y / 5)) % 16]);
            let coarse = region_grow_segment(&img, tol, 1);
            let fine = region_grow_segment(&img, tol * shrink, 1);
            for y in 0..20 {
                for x in 0..30 {
                    for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                        if nx < 30 && ny < 20 && coarse.label(x, y) != coarse.label(nx, ny) {
                            prop_assert!(fine.label(x, y) != fine.label(nx, ny));
                        }
                    }
                }
            }
        }
    }
}
