//! Dense row-major grids: images, latents and masks.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// `height × width × channels` array of reals, row-major with channels
/// innermost. Pixel `(u, v)` is column `u`, row `v`; pixel centres sit on
/// integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Colour image with values nominally in `[0, 1]`.
pub type Image = Grid;

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::contract(alloc::format!(
                "grid data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for v in 0..height {
            for u in 0..width {
                for c in 0..channels {
                    data.push(f(v, u, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, v: usize, u: usize) -> usize {
        (v * self.width + u) * self.channels
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize, c: usize) -> f64 {
        self.data[self.offset(v, u) + c]
    }

    #[inline]
    pub fn set(&mut self, v: usize, u: usize, c: usize, value: f64) {
        let o = self.offset(v, u);
        self.data[o + c] = value;
    }

    #[inline]
    pub fn pixel(&self, v: usize, u: usize) -> &[f64] {
        let o = self.offset(v, u);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, v: usize, u: usize) -> &mut [f64] {
        let o = self.offset(v, u);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    /// Bilinear interpolation weights for continuous position `(x, y)`,
    /// clamped to the grid. Returns `(row, col, weight)` for the four taps.
    pub fn bilinear_taps(&self, x: f64, y: f64) -> [(usize, usize, f64); 4] {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = math::floor(x);
        let y0 = math::floor(y);
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as usize;
        let y0 = y0 as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        ]
    }

    /// Bilinear sample of all channels at `(x, y)` (clamped to the border).
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (v, u, w) in self.bilinear_taps(x, y) {
            if w == 0.0 {
                continue;
            }
            for (o, val) in out.iter_mut().zip(self.pixel(v, u)) {
                *o += w * val;
            }
        }
    }

    /// Adjoint of [`Grid::sample_bilinear`]: accumulates `grad` into the four
    /// taps of `(x, y)`.
    pub fn scatter_bilinear(&mut self, x: f64, y: f64, grad: &[f64]) {
        for (v, u, w) in self.bilinear_taps(x, y) {
            if w == 0.0 {
                continue;
            }
            for (o, g) in self.pixel_mut(v, u).iter_mut().zip(grad) {
                *o += w * g;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        assert!(self.same_shape(other), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| math::abs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
        assert!(self.same_shape(other), "shape mismatch");
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    /// 3×3 box blur averaging over in-bounds neighbours, per channel.
    pub fn box_blur(&self) -> Grid {
        let mut out = Grid::zeros(self.height, self.width, self.channels);
        for v in 0..self.height {
            for u in 0..self.width {
                let (v0, v1) = (v.saturating_sub(1), (v + 1).min(self.height - 1));
                let (u0, u1) = (u.saturating_sub(1), (u + 1).min(self.width - 1));
                let count = ((v1 - v0 + 1) * (u1 - u0 + 1)) as f64;
                for vv in v0..=v1 {
                    for uu in u0..=u1 {
                        for c in 0..self.channels {
                            let o = out.offset(v, u) + c;
                            out.data[o] += self.get(vv, uu, c) / count;
                        }
                    }
                }
            }
        }
        out
    }

    /// Transpose of [`Grid::box_blur`] as a linear map.
    pub fn box_blur_transpose(&self) -> Grid {
        let mut out = Grid::zeros(self.height, self.width, self.channels);
        for v in 0..self.height {
            for u in 0..self.width {
                let (v0, v1) = (v.saturating_sub(1), (v + 1).min(self.height - 1));
                let (u0, u1) = (u.saturating_sub(1), (u + 1).min(self.width - 1));
                let count = ((v1 - v0 + 1) * (u1 - u0 + 1)) as f64;
                for vv in v0..=v1 {
                    for uu in u0..=u1 {
                        for c in 0..self.channels {
                            let o = out.offset(vv, uu) + c;
                            out.data[o] += self.get(v, u, c) / count;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Diffusion latent tagged with the step it lives at.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub values: Grid,
    pub timestep: usize,
    /// Ratio of image resolution to latent resolution.
    pub latent_stride: usize,
}

impl LatentGrid {
    pub fn new(values: Grid, timestep: usize, latent_stride: usize) -> Self {
        Self {
            values,
            timestep,
            latent_stride,
        }
    }

    pub fn with_timestep(mut self, timestep: usize) -> Self {
        self.timestep = timestep;
        self
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.shape()
    }
}

/// Per-pixel weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl MaskGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::contract("mask length does not match its resolution"));
        }
        if let Some(bad) = values.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::invalid(alloc::format!("mask value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for v in 0..height {
            for u in 0..width {
                values.push(f(v, u).clamp(0.0, 1.0));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize) -> f64 {
        self.values[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, v: usize, u: usize, value: f64) {
        self.values[v * self.width + u] = value.clamp(0.0, 1.0);
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&x| x == 0.0)
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&x| x > threshold).count()
    }

    /// Intersection over union of the two masks thresholded at 0.5.
    pub fn iou(&self, other: &MaskGrid) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.values.iter().zip(&other.values) {
            let (a, b) = (*a > 0.5, *b > 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Grey-level dilation with a `(2r+1)²` square; out-of-bounds ignored.
    pub fn dilate(&self, radius: usize) -> MaskGrid {
        self.morph(radius, f64::max, 0.0)
    }

    /// Grey-level erosion with a `(2r+1)²` square; out-of-bounds ignored.
    pub fn erode(&self, radius: usize) -> MaskGrid {
        self.morph(radius, f64::min, 1.0)
    }

    /// Dilation followed by erosion, computed on a canvas padded by
    /// `radius` zeros so the border does not grow the mask.
    pub fn close(&self, radius: usize) -> MaskGrid {
        let r = radius;
        let padded = MaskGrid::from_fn(self.height + 2 * r, self.width + 2 * r, |v, u| {
            if v < r || u < r || v >= self.height + r || u >= self.width + r {
                0.0
            } else {
                self.get(v - r, u - r)
            }
        });
        let closed = padded.dilate(r).erode(r);
        MaskGrid::from_fn(self.height, self.width, |v, u| closed.get(v + r, u + r))
    }

    fn morph(&self, radius: usize, op: fn(f64, f64) -> f64, init: f64) -> MaskGrid {
        let mut out = MaskGrid::zeros(self.height, self.width);
        for v in 0..self.height {
            for u in 0..self.width {
                let mut acc = init;
                for vv in v.saturating_sub(radius)..=(v + radius).min(self.height - 1) {
                    for uu in u.saturating_sub(radius)..=(u + radius).min(self.width - 1) {
                        acc = op(acc, self.get(vv, uu));
                    }
                }
                out.values[v * self.width + u] = acc;
            }
        }
        out
    }

    /// Block-mean downsampling by an integer stride.
    pub fn downsample_mean(&self, stride: usize) -> Result<MaskGrid> {
        if stride == 0 || !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(Error::contract(alloc::format!(
                "mask {}x{} not divisible by stride {stride}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / stride, self.width / stride);
        let norm = (stride * stride) as f64;
        Ok(MaskGrid::from_fn(h, w, |v, u| {
            let mut acc = 0.0;
            for dv in 0..stride {
                for du in 0..stride {
                    acc += self.get(v * stride + dv, u * stride + du);
                }
            }
            acc / norm
        }))
    }

    /// Nearest-neighbour upsampling by an integer stride.
    pub fn upsample_nearest(&self, stride: usize) -> MaskGrid {
        MaskGrid::from_fn(self.height * stride, self.width * stride, |v, u| {
            self.get(v / stride, u / stride)
        })
    }

    pub fn threshold(&self, threshold: f64) -> MaskGrid {
        MaskGrid {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&x| if x > threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}
