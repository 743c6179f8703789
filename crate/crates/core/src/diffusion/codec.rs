use alloc::format;

use nalgebra::DMatrix;

use crate::grid::{Grid, Image, LatentGrid};
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Maps clean latents to images and back.
pub trait Decoder {
    fn latent_channels(&self) -> usize;
    fn stride(&self) -> usize;
    fn decode(&self, z: &LatentGrid) -> Image;
    /// Least-squares inverse of [`Decoder::decode`]; returns a step-0 latent.
    fn encode(&self, image: &Image) -> Result<LatentGrid>;
}

/// Nearest-neighbour upsampling followed by a fixed `3 × c` colour
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    stride: usize,
    projection: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl LatentCodec {
    /// `c = 3`, stride 1, identity projection.
    pub fn identity() -> Self {
        Self {
            stride: 1,
            projection: DMatrix::identity(3, 3),
            inverse: DMatrix::identity(3, 3),
        }
    }

    /// Projection entries drawn i.i.d. `N(0, 0.25)` from `seed`.
    pub fn seeded_linear(channels: usize, stride: usize, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let projection = DMatrix::from_fn(3, channels, |_, _| 0.5 * rng.normal());
        Self::with_projection(projection, stride)
    }

    pub fn with_projection(projection: DMatrix<f64>, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("latent stride must be positive".into()));
        }
        if projection.nrows() != 3 || projection.ncols() == 0 {
            return Err(Error::Config("decoder projection must be 3 x c with c >= 1".into()));
        }
        let sv = projection.clone().svd(false, false).singular_values;
        let (max, min) = (sv.max(), sv.min());
        if !(min > 1e-9 * max.max(1e-300)) {
            return Err(Error::Config(format!(
                "decoder projection is rank deficient (singular values {min:e}..{max:e})"
            )));
        }
        let inverse = projection
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Config(format!("decoder projection has no pseudo-inverse: {e}")))?;
        Ok(Self {
            stride,
            projection,
            inverse,
        })
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }
}

impl Decoder for LatentCodec {
    fn latent_channels(&self) -> usize {
        self.projection.ncols()
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn decode(&self, z: &LatentGrid) -> Image {
        let g = &z.values;
        let s = self.stride;
        let c = self.latent_channels();
        assert_eq!(g.channels(), c, "latent channel count does not match decoder");
        let mut img = Grid::zeros(g.height() * s, g.width() * s, 3);
        for v in 0..g.height() {
            for u in 0..g.width() {
                let lat = g.pixel(v, u);
                let mut rgb = [0.0; 3];
                for (k, out) in rgb.iter_mut().enumerate() {
                    *out = (0..c).map(|j| self.projection[(k, j)] * lat[j]).sum();
                }
                for dv in 0..s {
                    for du in 0..s {
                        img.pixel_mut(v * s + dv, u * s + du).copy_from_slice(&rgb);
                    }
                }
            }
        }
        img
    }

    fn encode(&self, image: &Image) -> Result<LatentGrid> {
        let s = self.stride;
        if image.channels() != 3 {
            return Err(Error::Config(format!("expected a 3-channel image, got {}", image.channels())));
        }
        if !image.height().is_multiple_of(s) || !image.width().is_multiple_of(s) {
            return Err(Error::Config(format!(
                "{}x{} image is not divisible by latent stride {s}",
                image.height(),
                image.width()
            )));
        }
        let (h, w, c) = (image.height() / s, image.width() / s, self.latent_channels());
        let norm = (s * s) as f64;
        let mut z = Grid::zeros(h, w, c);
        for v in 0..h {
            for u in 0..w {
                let mut rgb = [0.0; 3];
                for dv in 0..s {
                    for du in 0..s {
                        for (acc, x) in rgb.iter_mut().zip(image.pixel(v * s + dv, u * s + du)) {
                            *acc += x / norm;
                        }
                    }
                }
                for (j, out) in z.pixel_mut(v, u).iter_mut().enumerate() {
                    *out = (0..3).map(|k| self.inverse[(j, k)] * rgb[k]).sum();
                }
            }
        }
        Ok(LatentGrid::new(z, 0, s))
    }
}
