//! Synthetic two-class radiograph-like images for smoke tests and demos.
//!
//! Every image has a smooth random background. Positives carry a striped, textured blob
//! centred in the top-left quadrant; negatives carry either nothing or a smooth (untextured)
//! blob anywhere in the frame. Images of one class are therefore distinguishable only by local
//! texture.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{DatasetManifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::imageops::resize_plane;
use crate::pretrain::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    pub positive_fraction: f64,
    /// Consecutive images sharing one patient id.
    pub images_per_patient: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 500,
            size: 64,
            positive_fraction: 0.5,
            images_per_patient: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Array3<f32>,
    pub label: u32,
    pub patient_id: String,
    /// Blob centre `(y, x)` in pixels, if the image has a blob.
    pub blob_center: Option<(f32, f32)>,
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Array2<f32> {
    let coarse = Array2::from_shape_fn((5, 5), |_| rng.random::<f32>());
    let mut bg = resize_plane(&coarse, size, size);
    bg.mapv_inplace(|v| 0.25 + 0.3 * v);
    bg.mapv_inplace(|v| v + 0.02 * (rng.random::<f32>() - 0.5));
    bg
}

fn add_blob(img: &mut Array2<f32>, center: (f32, f32), radius: f32, textured: bool, rng: &mut ChaCha8Rng) {
    let theta = rng.random::<f32>() * PI;
    let period = rng.random_range(5.0f32..7.0);
    let phase = rng.random::<f32>() * 2.0 * PI;
    let (dir_y, dir_x) = (theta.sin(), theta.cos());
    for ((y, x), v) in img.indexed_iter_mut() {
        let dy = y as f32 - center.0;
        let dx = x as f32 - center.1;
        let envelope = (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp();
        let signal = if textured {
            0.45 * (2.0 * PI * (dy * dir_y + dx * dir_x) / period + phase).sin()
        } else {
            0.3
        };
        *v += envelope * signal;
    }
}

fn sample(config: &SyntheticConfig, index: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[index as u64]));
    let size = config.size;
    let s = size as f32;
    let label = u32::from(rng.random::<f64>() < config.positive_fraction);
    let mut plane = background(&mut rng, size);
    let radius = s / 10.0;
    let blob_center = if label == 1 {
        let c = (rng.random_range(0.15..0.35) * s, rng.random_range(0.15..0.35) * s);
        add_blob(&mut plane, c, radius, true, &mut rng);
        Some(c)
    } else if rng.random::<bool>() {
        let c = (rng.random_range(0.15..0.85) * s, rng.random_range(0.15..0.85) * s);
        add_blob(&mut plane, c, radius, false, &mut rng);
        Some(c)
    } else {
        None
    };
    plane.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let image = Array3::from_shape_fn((3, size, size), |(_, y, x)| plane[[y, x]]);
    SyntheticSample {
        image,
        label,
        patient_id: format!("synth{:05}", index / config.images_per_patient.max(1)),
        blob_center,
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    if config.count == 0 || config.size < 16 {
        return Err(Error::invalid("synthetic data needs count >= 1 and size >= 16"));
    }
    if !(0.0..=1.0).contains(&config.positive_fraction) {
        return Err(Error::invalid("positive_fraction must lie in [0, 1]"));
    }
    Ok((0..config.count).into_par_iter().map(|i| sample(config, i)).collect())
}

/// Writes every sample as an 8-bit grayscale PNG under `dir/images/` and returns a manifest
/// (also written to `dir/<name>.csv`) with paths relative to `dir`.
pub fn write_dataset(samples: &[SyntheticSample], dir: &Path, name: &str) -> Result<DatasetManifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (_, h, w) = s.image.dim();
            let mut png = GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    png.put_pixel(x as u32, y as u32, Luma([(s.image[[0, y, x]] * 255.0).round() as u8]));
                }
            }
            let rel = format!("images/{i:05}.png");
            let path = dir.join(&rel);
            png.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Ok(SampleRecord {
                image_path: rel.into(),
                label: Some(s.label),
                patient_id: s.patient_id.clone(),
                split: Split::Unassigned,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(name, records);
    if let Some(first) = samples.first() {
        let (_, h, w) = first.image.dim();
        manifest.image_size = (h, w);
    }
    let csv = dir.join(format!("{name}.csv"));
    fs::write(&csv, manifest.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(manifest)
}
