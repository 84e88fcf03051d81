//! Datasets, normalization, augmentation and image export.

mod cifar;
mod image;
mod synthetic;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use cifar::{parse_cifar, parse_cifar_bytes, serialize_cifar, write_cifar, CifarVariant};
pub use image::{colormap, encode_image, quantize, write_image, ImagePayload};
pub use synthetic::{synthetic_shapes, ShapeKind};

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

/// One image in `[0, 1]` pixel space, stored channel-major (`c·h·w`).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f64>,
    pub label: usize,
    /// CIFAR-100 coarse label, kept so records round-trip.
    pub coarse_label: Option<u8>,
    pub source: String,
}

/// Per-channel mean and standard deviation in pixel space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization stats have {} means / {} stds for {channels} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("normalization stds must be positive and finite".into()));
        }
        Ok(())
    }

    /// Mean and (population) standard deviation of each channel over `images`.
    pub fn from_images(images: &[LabeledImage], channels: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(arg_err("norm_stats", "no images"));
        }
        let plane = images[0].pixels.len() / channels;
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for img in images {
            for c in 0..channels {
                for &v in &img.pixels[c * plane..(c + 1) * plane] {
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (images.len() * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-6)
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, pixels: &[f64]) -> Vec<f64> {
        let plane = pixels.len() / self.mean.len();
        pixels.iter().enumerate().map(|(i, v)| (v - self.mean[i / plane]) / self.std[i / plane]).collect()
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        let plane = values.len() / self.mean.len();
        values.iter().enumerate().map(|(i, v)| v * self.std[i / plane] + self.mean[i / plane]).collect()
    }
}

/// A labeled split with fixed geometry and the normalization applied before
/// images reach a model.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub classes: usize,
    /// `[channels, height, width]`
    pub shape: [usize; 3],
    pub stats: NormStats,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>, classes: usize, shape: [usize; 3], stats: NormStats) -> Result<Self> {
        stats.validate(shape[0])?;
        let len = shape.iter().product::<usize>();
        for (i, img) in images.iter().enumerate() {
            if img.pixels.len() != len {
                return Err(arg_err("dataset", format!("image {i} has {} values, expected {len}", img.pixels.len())));
            }
            if img.label >= classes {
                return Err(arg_err("dataset", format!("image {i} has label {} but only {classes} classes", img.label)));
            }
        }
        Ok(Self { images, classes, shape, stats })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn with_stats(mut self, stats: NormStats) -> Result<Self> {
        stats.validate(self.shape[0])?;
        self.stats = stats;
        Ok(self)
    }

    /// Keeps the first `n` images.
    pub fn truncate(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self
    }

    /// Normalized model input for image `i`.
    pub fn input(&self, i: usize) -> Vec<f64> {
        self.stats.normalize(&self.images[i].pixels)
    }

    /// Normalized `[n, c, h, w]` batch for the given indices, plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.shape.iter().product::<usize>());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.images.get(i).ok_or_else(|| arg_err("dataset", format!("index {i} out of range")))?;
            data.extend(self.stats.normalize(&img.pixels));
            labels.push(img.label);
        }
        let [c, h, w] = self.shape;
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// Like [`Dataset::batch`] with random `pad`-pixel crop and horizontal flip.
    pub fn augmented_batch<R: Rng>(&self, indices: &[usize], pad: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
        let [c, h, w] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.images.get(i).ok_or_else(|| arg_err("dataset", format!("index {i} out of range")))?;
            let dy = rng.gen_range(0..=2 * pad);
            let dx = rng.gen_range(0..=2 * pad);
            let flip = rng.gen_bool(0.5);
            let shifted = crop_shift(&img.pixels, self.shape, pad, dy, dx, flip);
            data.extend(self.stats.normalize(&shifted));
            labels.push(img.label);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }
}

/// Zero-pads by `pad`, takes the `h×w` window at `(dy, dx)` and optionally
/// mirrors it horizontally.
pub fn crop_shift(pixels: &[f64], shape: [usize; 3], pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let tx = if flip { w - 1 - x } else { x };
                let sx = (tx + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = pixels[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(pixels: Vec<f64>, label: usize) -> LabeledImage {
        LabeledImage { pixels, label, coarse_label: None, source: "t".into() }
    }

    #[test]
    fn stats_and_roundtrip() {
        let images = vec![img(vec![0.0, 1.0, 0.5, 0.5], 0), img(vec![1.0, 0.0, 0.5, 0.5], 1)];
        let s = NormStats::from_images(&images, 2).unwrap();
        assert_eq!(s.mean, vec![0.5, 0.5]);
        assert_eq!(s.std[0], 0.5);
        let x = vec![0.2, 0.9, 0.4, 0.7];
        let back = s.denormalize(&s.normalize(&x));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(NormStats { mean: vec![0.0], std: vec![0.0] }.validate(1).is_err());
        assert!(NormStats::identity(3).validate(2).is_err());
    }

    #[test]
    fn dataset_checks_and_batches() {
        let images = vec![img(vec![0.1; 4], 0), img(vec![0.9; 4], 1)];
        assert!(Dataset::new(images.clone(), 1, [1, 2, 2], NormStats::identity(1)).is_err());
        let d = Dataset::new(images, 2, [1, 2, 2], NormStats::identity(1)).unwrap();
        let (x, t) = d.batch(&[1, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(t, vec![1, 0]);
        assert_eq!(x.data()[0], 0.9);
        assert!(d.batch(&[5]).is_err());
    }

    #[test]
    fn crop_shift_identity_and_flip() {
        let p: Vec<f64> = (0..6).map(f64::from).collect();
        assert_eq!(crop_shift(&p, [1, 2, 3], 1, 1, 1, false), p);
        assert_eq!(crop_shift(&p, [1, 2, 3], 1, 1, 1, true), vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(crop_shift(&p, [1, 2, 3], 1, 0, 0, false), vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
