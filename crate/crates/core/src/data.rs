//! In-memory image classification data.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Images stored `N × C × H × W`, already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Train-time augmentation: zero-padded random crop and horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    pub crop_padding: usize,
    pub horizontal_flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            crop_padding: 4,
            horizontal_flip: true,
        }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self {
            crop_padding: 0,
            horizontal_flip: false,
        }
    }
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        images: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Config(format!(
                "{} values for {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Config(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.image_len();
        &self.images[i * s..(i + 1) * s]
    }

    /// Rows `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Assembles a batch, optionally augmenting each image with `rng`.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        indices: &[usize],
        augment: Option<(&Augment, &mut R)>,
    ) -> (Tensor, Vec<u8>) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut x = Tensor::zeros(indices.len(), c, h, w);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        match augment {
            None => {
                for (k, &i) in indices.iter().enumerate() {
                    x.sample_mut(k).copy_from_slice(self.image(i));
                }
            }
            Some((aug, rng)) => {
                let p = aug.crop_padding as i64;
                for (k, &i) in indices.iter().enumerate() {
                    let (dy, dx) = if p > 0 {
                        (
                            rng.random_range(-p..=p) as isize,
                            rng.random_range(-p..=p) as isize,
                        )
                    } else {
                        (0, 0)
                    };
                    let flip = aug.horizontal_flip && rng.random_bool(0.5);
                    let src = self.image(i);
                    let dst = x.sample_mut(k);
                    for ch in 0..c {
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w {
                                let ox = if flip { w - 1 - xx } else { xx };
                                let sx = ox as isize + dx;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                dst[(ch * h + y) * w + xx] =
                                    src[(ch * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        (x, labels)
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let hw = self.height * self.width;
        let count = (self.len() * hw) as f64;
        let mut mean = vec![0.0f64; self.channels];
        let mut var = vec![0.0f64; self.channels];
        for img in self.images.chunks(self.image_len()) {
            for (c, plane) in img.chunks(hw).enumerate() {
                mean[c] += plane.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count.max(1.0));
        for img in self.images.chunks(self.image_len()) {
            for (c, plane) in img.chunks(hw).enumerate() {
                var[c] += plane
                    .iter()
                    .map(|&v| (v as f64 - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / count.max(1.0)).sqrt()).collect();
        (mean, std)
    }

    /// `(x - mean) / std` per channel, in place.
    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        if mean.len() != self.channels
            || std.len() != self.channels
            || std.iter().any(|&s| !(s > 0.0))
        {
            return Err(Error::Config(
                "normalization statistics do not fit the data".into(),
            ));
        }
        let hw = self.height * self.width;
        let per = self.image_len();
        for img in self.images.chunks_mut(per) {
            for (c, plane) in img.chunks_mut(hw).enumerate() {
                for v in plane {
                    *v = ((*v as f64 - mean[c]) / std[c]) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Training and evaluation sets plus train-time augmentation.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub eval: Dataset,
    pub augment: Augment,
}

/// Seeded choice of `round(fraction · n)` indices out of `0..n`, sorted.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subset fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if fraction < 1.0 {
        let k = ((n as f64) * fraction).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(k.max(1).min(n));
        idx.sort_unstable();
    }
    Ok(idx)
}

/// Class-conditional noisy templates in a CIFAR-like layout. Each class owns a
/// smooth random pattern; samples add Gaussian noise of standard deviation
/// `noise` to it.
pub fn synthetic(
    n: usize,
    classes: usize,
    channels: usize,
    size: usize,
    noise: f32,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || classes > 256 {
        return Err(Error::Config(format!("{classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = channels * size * size;
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let fx: f32 = rng.random_range(0.5..3.0);
            let fy: f32 = rng.random_range(0.5..3.0);
            let phase: Vec<f32> = (0..channels)
                .map(|_| rng.random_range(0.0..std::f32::consts::TAU))
                .collect();
            let mut t = vec![0.0; per];
            for c in 0..channels {
                for y in 0..size {
                    for x in 0..size {
                        let u = (x as f32 / size as f32) * fx * std::f32::consts::TAU;
                        let v = (y as f32 / size as f32) * fy * std::f32::consts::TAU;
                        t[(c * size + y) * size + x] = (u + phase[c]).sin() * (v - phase[c]).cos();
                    }
                }
            }
            t
        })
        .collect();
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % classes) as u8;
        labels.push(label);
        for &t in &templates[label as usize] {
            let e: f32 = rng.sample(StandardNormal);
            images.push(t + noise * e);
        }
    }
    Dataset::new(channels, size, size, classes, images, labels)
}
