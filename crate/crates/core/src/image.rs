//! Dense row-major grids, sampling, smoothing and image pyramids.

use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};

/// Row-major 2D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Value with coordinates clamped to the border.
    #[inline]
    pub fn at_clamped(&self, x: i64, y: i64) -> T {
        let xc = x.clamp(0, self.width as i64 - 1) as usize;
        let yc = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[yc * self.width + xc]
    }
}

pub type ImageF = Grid<f64>;

impl Grid<f64> {
    /// Bilinear sample with zero padding outside the grid.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let g = |xx: i64, yy: i64| {
            if self.in_bounds(xx, yy) {
                self.data[yy as usize * self.width + xx as usize]
            } else {
                0.0
            }
        };
        (1.0 - fy) * ((1.0 - fx) * g(xi, yi) + fx * g(xi + 1, yi))
            + fy * ((1.0 - fx) * g(xi, yi + 1) + fx * g(xi + 1, yi + 1))
    }

    /// Bilinear sample with border clamping, `None` when outside the image.
    pub fn sample_bilinear_clamped(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return None;
        }
        let x0 = x.floor() as i64;
        let y0 = y.floor() as i64;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let a = self.at_clamped(x0, y0);
        let b = self.at_clamped(x0 + 1, y0);
        let c = self.at_clamped(x0, y0 + 1);
        let d = self.at_clamped(x0 + 1, y0 + 1);
        Some((1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d))
    }

    /// Catmull-Rom bicubic sample returning `(value, d/dx, d/dy)`, zero-padded.
    ///
    /// The interpolant is C¹, so its analytic gradient agrees with finite
    /// differences everywhere.
    pub fn sample_bicubic_grad(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let x0 = x.floor();
        let y0 = y.floor();
        let tx = x - x0;
        let ty = y - y0;
        let (xi, yi) = (x0 as i64, y0 as i64);
        if xi < -2 || yi < -2 || xi > self.width as i64 + 1 || yi > self.height as i64 + 1 {
            return (0.0, 0.0, 0.0);
        }
        let wx = catmull_rom_weights(tx);
        let wy = catmull_rom_weights(ty);
        let dwx = catmull_rom_dweights(tx);
        let dwy = catmull_rom_dweights(ty);
        let mut v = 0.0;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (j, (wyj, dwyj)) in wy.iter().zip(dwy.iter()).enumerate() {
            let yy = yi - 1 + j as i64;
            let mut row_v = 0.0;
            let mut row_d = 0.0;
            for (i, (wxi, dwxi)) in wx.iter().zip(dwx.iter()).enumerate() {
                let xx = xi - 1 + i as i64;
                if !self.in_bounds(xx, yy) {
                    continue;
                }
                let s = self.data[yy as usize * self.width + xx as usize];
                row_v += wxi * s;
                row_d += dwxi * s;
            }
            v += wyj * row_v;
            gx += wyj * row_d;
            gy += dwyj * row_v;
        }
        (v, gx, gy)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn abs(&self) -> ImageF {
        self.map(|v| v.abs())
    }
}

fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

fn catmull_rom_dweights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    [
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    ]
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &ImageF, sigma: f64, exec: Exec) -> ImageF {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width(), img.height());
    let mut tmp = vec![0.0; w * h];
    par::for_each_row(exec, &mut tmp, w, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * img.at_clamped(x as i64 + i as i64 - r, y as i64);
            }
            *out = acc;
        }
    });
    let tmp = ImageF::from_vec(w, h, tmp);
    let mut out = vec![0.0; w * h];
    par::for_each_row(exec, &mut out, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp.at_clamped(x as i64, y as i64 + i as i64 - r);
            }
            *o = acc;
        }
    });
    ImageF::from_vec(w, h, out)
}

/// 2×2 box downsample.
pub fn downsample(img: &ImageF) -> ImageF {
    let w = (img.width() / 2).max(1);
    let h = (img.height() / 2).max(1);
    ImageF::from_fn(w, h, |x, y| {
        let (x2, y2) = (2 * x as i64, 2 * y as i64);
        0.25 * (img.at_clamped(x2, y2)
            + img.at_clamped(x2 + 1, y2)
            + img.at_clamped(x2, y2 + 1)
            + img.at_clamped(x2 + 1, y2 + 1))
    })
}

/// Pyramid with `levels` images; level 0 is the input.
pub fn pyramid(img: &ImageF, levels: usize) -> Vec<ImageF> {
    let mut out = vec![img.clone()];
    for _ in 1..levels.max(1) {
        let blurred = gaussian_blur(out.last().unwrap(), 0.8, Exec::Sequential);
        out.push(downsample(&blurred));
    }
    out
}

/// Central-difference gradients `(gx, gy)` with replicated borders.
pub fn central_gradients(img: &ImageF) -> (ImageF, ImageF) {
    let (w, h) = (img.width(), img.height());
    let gx = ImageF::from_fn(w, h, |x, y| {
        0.5 * (img.at_clamped(x as i64 + 1, y as i64) - img.at_clamped(x as i64 - 1, y as i64))
    });
    let gy = ImageF::from_fn(w, h, |x, y| {
        0.5 * (img.at_clamped(x as i64, y as i64 + 1) - img.at_clamped(x as i64, y as i64 - 1))
    });
    (gx, gy)
}

/// Sobel gradients (unnormalised).
pub fn sobel(img: &ImageF) -> (ImageF, ImageF) {
    let (w, h) = (img.width(), img.height());
    let g = |x: i64, y: i64| img.at_clamped(x, y);
    let gx = ImageF::from_fn(w, h, |x, y| {
        let (x, y) = (x as i64, y as i64);
        (g(x + 1, y - 1) + 2.0 * g(x + 1, y) + g(x + 1, y + 1))
            - (g(x - 1, y - 1) + 2.0 * g(x - 1, y) + g(x - 1, y + 1))
    });
    let gy = ImageF::from_fn(w, h, |x, y| {
        let (x, y) = (x as i64, y as i64);
        (g(x - 1, y + 1) + 2.0 * g(x, y + 1) + g(x + 1, y + 1))
            - (g(x - 1, y - 1) + 2.0 * g(x, y - 1) + g(x + 1, y - 1))
    });
    (gx, gy)
}

/// Intensity image in `[0, 1]` with a validity mask (false where no surface was hit).
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    pub pixels: ImageF,
    pub valid: Grid<bool>,
}

impl IntensityImage {
    pub fn new(pixels: ImageF) -> Self {
        let valid = Grid::new(pixels.width(), pixels.height(), true);
        Self { pixels, valid }
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, data: &[u8]) -> Self {
        let pixels = ImageF::from_vec(width, height, data.iter().map(|&v| v as f64 / 255.0).collect());
        Self::new(pixels)
    }
}

/// Metric depth (along the optical axis) with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: ImageF,
    pub valid: Grid<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            depth: ImageF::new(width, height, 0.0),
            valid: Grid::new(width, height, false),
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|v| **v).count()
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        if self.valid.at(x, y) {
            Some(self.depth.at(x, y))
        } else {
            None
        }
    }
}
