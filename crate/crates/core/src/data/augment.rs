use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::ImageShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stochastic input augmentation applied independently to every example.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Mirror left-right with probability 0.5.
    pub horizontal_flip: bool,
    /// Maximum translation in pixels, drawn uniformly from `[-s, s]` on each axis.
    pub shift_pixels: usize,
    pub gaussian_stddev: f64,
    pub image_shape: Option<ImageShape>,
}

impl AugmentationSpec {
    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip && self.shift_pixels == 0 && self.gaussian_stddev == 0.0
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.gaussian_stddev >= 0.0 && self.gaussian_stddev.is_finite()) {
            return Err(Error::Argument(format!(
                "augmentation stddev {} must be finite and >= 0",
                self.gaussian_stddev
            )));
        }
        if self.horizontal_flip || self.shift_pixels > 0 {
            let Some((h, w, c)) = self.image_shape else {
                return Err(Error::Argument("flip and shift need an image shape".into()));
            };
            if h * w * c != dim {
                return Err(Error::Dimension(format!(
                    "image shape {:?} does not cover {dim} features",
                    (h, w, c)
                )));
            }
            if self.shift_pixels >= w || self.shift_pixels >= h {
                return Err(Error::Argument(format!(
                    "shift of {} pixels does not fit a {h}x{w} image",
                    self.shift_pixels
                )));
            }
        }
        Ok(())
    }
}

/// Mirrors an HWC image left-right.
pub fn flip_horizontal(example: &[f64], (h, w, c): ImageShape) -> Vec<f64> {
    let mut out = vec![0.0; example.len()];
    for r in 0..h {
        for col in 0..w {
            let src = (r * w + col) * c;
            let dst = (r * w + (w - 1 - col)) * c;
            out[dst..dst + c].copy_from_slice(&example[src..src + c]);
        }
    }
    out
}

/// Translates an HWC image by `dx` columns (positive: right) and `dy` rows
/// (positive: down), filling uncovered pixels with zero.
pub fn shift(example: &[f64], (h, w, c): ImageShape, dx: isize, dy: isize) -> Vec<f64> {
    let mut out = vec![0.0; example.len()];
    for r in 0..h as isize {
        let sr = r - dy;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for col in 0..w as isize {
            let sc = col - dx;
            if sc < 0 || sc >= w as isize {
                continue;
            }
            let src = (sr as usize * w + sc as usize) * c;
            let dst = (r as usize * w + col as usize) * c;
            out[dst..dst + c].copy_from_slice(&example[src..src + c]);
        }
    }
    out
}

/// Applies, in order: a coin-flip horizontal mirror, a random integer shift
/// with zero padding, and additive Gaussian noise.
pub fn augment<R: Rng + ?Sized>(example: &[f64], spec: &AugmentationSpec, rng: &mut R) -> Result<Vec<f64>> {
    spec.validate(example.len())?;
    let mut out = example.to_vec();
    if let Some(shape) = spec.image_shape {
        if spec.horizontal_flip && rng.gen_bool(0.5) {
            out = flip_horizontal(&out, shape);
        }
        if spec.shift_pixels > 0 {
            let s = spec.shift_pixels as isize;
            let dx = rng.gen_range(-s..=s);
            let dy = rng.gen_range(-s..=s);
            out = shift(&out, shape, dx, dy);
        }
    }
    if spec.gaussian_stddev > 0.0 {
        let normal = Normal::new(0.0, spec.gaussian_stddev)
            .map_err(|e| Error::Argument(format!("augmentation noise: {e}")))?;
        out.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Ok(out)
}

/// Augments every row of a batch; the identity spec returns a plain copy
/// without touching the rng.
pub fn augment_batch<R: Rng + ?Sized>(batch: &Tensor, spec: &AugmentationSpec, rng: &mut R) -> Result<Tensor> {
    if spec.is_identity() {
        return Ok(batch.clone());
    }
    let mut data = Vec::with_capacity(batch.len());
    for row in batch.row_iter() {
        data.extend(augment(row, spec, rng)?);
    }
    Tensor::matrix(batch.rows(), batch.cols(), data)
}
