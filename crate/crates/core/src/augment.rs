//! Stochastic view generation for positive pairs.

use ndarray::{s, Array3, Array4, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{crop_resize, sample_clamped};

/// Distribution parameters of the augmentation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Area fraction of the random crop, `(min, max)` within `(0, 1]`.
    pub crop_scale_range: (f64, f64),
    pub flip_probability: f64,
    /// Maximum absolute rotation angle in degrees.
    pub rotation_degrees: f64,
    /// Odd Gaussian kernel width in pixels.
    pub blur_kernel: usize,
    pub blur_sigma_range: (f64, f64),
    /// Brightness and contrast factors are drawn from `[1 - s, 1 + s]`.
    pub jitter_strength: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.6, 1.0),
            flip_probability: 0.5,
            rotation_degrees: 10.0,
            blur_kernel: 9,
            blur_sigma_range: (0.1, 2.0),
            jitter_strength: 0.4,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
            return Err(Error::invalid(format!(
                "crop_scale_range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid("flip_probability must lie in [0, 1]"));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees.is_finite()) {
            return Err(Error::invalid("rotation_degrees must be a finite value >= 0"));
        }
        if self.blur_kernel < 3 || self.blur_kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "blur_kernel must be odd and >= 3, got {}",
                self.blur_kernel
            )));
        }
        let (slo, shi) = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(Error::invalid("blur_sigma_range must satisfy 0 < min <= max"));
        }
        if !(self.jitter_strength >= 0.0 && self.jitter_strength.is_finite()) {
            return Err(Error::invalid("jitter_strength must be >= 0"));
        }
        Ok(())
    }
}

/// `2B` views of `B` source images. Views `2i` and `2i + 1` come from image `i`.
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    pub views: Array4<f32>,
    pub pair_index: Vec<(usize, usize)>,
    pub source_indices: Vec<usize>,
}

impl AugmentedBatch {
    pub fn num_pairs(&self) -> usize {
        self.pair_index.len()
    }

    pub fn num_views(&self) -> usize {
        self.views.dim().0
    }

    /// Negatives of a view: every view from another source image.
    pub fn negatives_of(&self, view: usize) -> Vec<usize> {
        let src = self.source_indices[view];
        (0..self.num_views())
            .filter(|&v| self.source_indices[v] != src)
            .collect()
    }

    /// Replaces positional source ids with the given per-image ids (e.g. manifest indices).
    pub fn with_source_indices(mut self, per_image: &[usize]) -> Result<Self> {
        if per_image.len() != self.num_pairs() {
            return Err(Error::Shape(format!(
                "{} source ids for {} images",
                per_image.len(),
                self.num_pairs()
            )));
        }
        self.source_indices = per_image.iter().flat_map(|&s| [s, s]).collect();
        Ok(self)
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// One random view: resized crop, horizontal flip, rotation, Gaussian blur, then
/// brightness/contrast jitter, clamped to `[0, 1]`.
pub fn augment_view(image: &Array3<f32>, config: &AugmentationConfig, seed: u64) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("expected (3, h, w) image, got {:?}", image.dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Draw every parameter up front so the sequence does not depend on the config.
    let scale = uniform(&mut rng, config.crop_scale_range.0, config.crop_scale_range.1);
    let off_y: f64 = rng.random();
    let off_x: f64 = rng.random();
    let flip = rng.random::<f64>() < config.flip_probability;
    let angle = uniform(&mut rng, -config.rotation_degrees, config.rotation_degrees);
    let sigma = uniform(&mut rng, config.blur_sigma_range.0, config.blur_sigma_range.1);
    let bright = uniform(&mut rng, 1.0 - config.jitter_strength, 1.0 + config.jitter_strength);
    let contrast = uniform(&mut rng, 1.0 - config.jitter_strength, 1.0 + config.jitter_strength);

    let side = scale.sqrt();
    let crop_h = (h as f64 * side).max(1.0);
    let crop_w = (w as f64 * side).max(1.0);
    let top = off_y * (h as f64 - crop_h);
    let left = off_x * (w as f64 - crop_w);
    let mut out = crop_resize(image, top as f32, left as f32, crop_h as f32, crop_w as f32, h, w);

    if flip {
        out.invert_axis(Axis(2));
        out = out.as_standard_layout().into_owned();
    }
    if angle != 0.0 {
        out = rotate(&out, angle.to_radians());
    }
    out = gaussian_blur(&out, config.blur_kernel, sigma);
    jitter(&mut out, bright as f32, contrast as f32);
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Rotation about the image centre with bilinear sampling; pixels mapped from outside are 0.
fn rotate(image: &Array3<f32>, radians: f64) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let (sin, cos) = (radians.sin() as f32, radians.cos() as f32);
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        let plane = image.index_axis(Axis(0), ch);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                let sy = cos * dy - sin * dx + cy;
                let sx = sin * dy + cos * dx + cx;
                if sy < -0.5 || sx < -0.5 || sy > h as f32 - 0.5 || sx > w as f32 - 0.5 {
                    continue;
                }
                out[[ch, y, x]] = sample_clamped(&plane, sy, sx);
            }
        }
    }
    out
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f32> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / total) as f32).collect()
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(image: &Array3<f32>, size: usize, sigma: f64) -> Array3<f32> {
    let kernel = gaussian_kernel(size, sigma);
    let half = (size / 2) as isize;
    let (c, h, w) = image.dim();
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * image[[ch, y, reflect(x as isize + k as isize - half, w)]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[[ch, reflect(y as isize + k as isize - half, h), x]];
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

/// Brightness scales every value; contrast scales the deviation from the image mean.
fn jitter(image: &mut Array3<f32>, brightness: f32, contrast: f32) {
    if brightness != 1.0 {
        image.mapv_inplace(|v| v * brightness);
    }
    if contrast != 1.0 {
        let mean = image.mean().unwrap_or(0.0);
        image.mapv_inplace(|v| (v - mean) * contrast + mean);
    }
}

/// Two independently augmented views per image.
pub fn make_pairs(images: &[Array3<f32>], config: &AugmentationConfig, seed: u64) -> Result<AugmentedBatch> {
    if images.is_empty() {
        return Err(Error::invalid("cannot build pairs from an empty batch"));
    }
    let dim = images[0].dim();
    if let Some(bad) = images.iter().position(|im| im.dim() != dim) {
        return Err(Error::Shape(format!(
            "image {bad} has shape {:?}, expected {:?}",
            images[bad].dim(),
            dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..2 * images.len()).map(|_| rng.next_u64()).collect();
    let views: Vec<Array3<f32>> = seeds
        .par_iter()
        .enumerate()
        .map(|(v, &s)| augment_view(&images[v / 2], config, s))
        .collect::<Result<_>>()?;
    let (c, h, w) = dim;
    let mut stack = Array4::<f32>::zeros((views.len(), c, h, w));
    for (i, v) in views.iter().enumerate() {
        stack.slice_mut(s![i, .., .., ..]).assign(v);
    }
    let b = images.len();
    Ok(AugmentedBatch {
        views: stack,
        pair_index: (0..b).map(|i| (2 * i, 2 * i + 1)).collect(),
        source_indices: (0..b).flat_map(|i| [i, i]).collect(),
    })
}
