//! Grad-CAM attention maps and t-SNE projections of feature matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::FittedProbe;
use crate::imageops::resize_plane;
use crate::model::{FeatureTap, ModelParameters};

pub const EMBEDDING_CSV_HEADER: &str = "record_index,x,y,label";

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `(h, w)` map at input resolution, values in `[0, 1]`.
    pub heatmap: Array2<f32>,
    pub source_id: String,
    pub layer: String,
    pub predicted_class: u32,
    pub logit: f64,
}

/// Scales a non-negative map so its maximum is 1. All-zero maps are returned unchanged.
pub fn normalize_heatmap(mut map: Array2<f32>) -> Array2<f32> {
    map.mapv_inplace(|v| if v.is_finite() { v.max(0.0) } else { 0.0 });
    let max = map.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        map.mapv_inplace(|v| (v / max).min(1.0));
    }
    map
}

/// Class activation map from one image's stage activation `(c, h, w)` and score gradient.
pub fn cam_from_activation(activation: &Array3<f32>, gradient: &Array3<f32>, out_hw: (usize, usize)) -> Array2<f32> {
    let (_, h, w) = activation.dim();
    let weights = gradient
        .mean_axis(Axis(2))
        .and_then(|g| g.mean_axis(Axis(1)))
        .expect("non-empty map");
    let mut cam = Array2::<f32>::zeros((h, w));
    for (c, &a) in weights.iter().enumerate() {
        cam.scaled_add(a, &activation.index_axis(Axis(0), c));
    }
    cam.mapv_inplace(|v| v.max(0.0));
    normalize_heatmap(resize_plane(&cam, out_hw.0, out_hw.1))
}

/// Grad-CAM for the probe's positive-class logit, taken through `tap`, at backbone stage
/// `target_layer` (see [`crate::model::BackboneSpec::stage_names`]).
pub fn grad_cam(
    params: &ModelParameters,
    probe: &FittedProbe,
    image: &Array3<f32>,
    source_id: &str,
    target_layer: &str,
    tap: FeatureTap,
) -> Result<AttentionMap> {
    let stages = params.backbone.stage_names();
    if !stages.iter().any(|s| s == target_layer) {
        return Err(Error::invalid(format!(
            "`{target_layer}` is not a convolutional stage; choose one of {}",
            stages.join(", ")
        )));
    }
    let (_, h, w) = image.dim();
    let images = image.clone().insert_axis(Axis(0));
    let g: Array1<f32> = probe.logit_gradient().mapv(|v| v as f32);
    let (act, grad, features) = params.stage_activation_and_gradient(&images, target_layer, tap, |f| {
        let mut out = Array2::zeros(f.dim());
        if f.ncols() == g.len() {
            out.rows_mut().into_iter().for_each(|mut r| r.assign(&g));
        }
        out
    })?;
    let logit = probe.logit(&features)?[0];
    let act = act.index_axis_move(Axis(0), 0);
    let grad = grad.index_axis_move(Axis(0), 0);
    Ok(AttentionMap {
        heatmap: cam_from_activation(&act, &grad, (h, w)),
        source_id: source_id.to_string(),
        layer: target_layer.to_string(),
        predicted_class: u32::from(logit >= 0.0),
        logit,
    })
}

/// One row per heatmap row, comma-separated.
pub fn heatmap_csv(map: &Array2<f32>) -> String {
    let mut out = String::new();
    for row in map.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn jet(t: f32) -> [f32; 3] {
    let f = |c: f32| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale image blended with a colour-mapped heatmap; weight follows heat.
pub fn overlay_image(image: &Array3<f32>, map: &Array2<f32>) -> Result<RgbImage> {
    let (c, h, w) = image.dim();
    if map.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "heatmap {:?} does not match image {:?}",
            map.dim(),
            (h, w)
        )));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let gray = (0..c).map(|ch| image[[ch, y, x]]).sum::<f32>() / c as f32;
            let t = map[[y, x]];
            let alpha = 0.6 * t;
            let col = jet(t);
            let px = [0, 1, 2].map(|i| to_u8((1.0 - alpha) * gray + alpha * col[i]));
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

/// Writes `<stem>_heatmap.csv` and `<stem>_overlay.png` into `dir`.
pub fn write_attention(map: &AttentionMap, image: &Array3<f32>, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}_heatmap.csv"));
    fs::write(&csv, heatmap_csv(&map.heatmap)).map_err(|e| Error::io(&csv, e))?;
    let png = dir.join(format!("{stem}_overlay.png"));
    overlay_image(image, &map.heatmap)?
        .save(&png)
        .map_err(|e| Error::Image {
            path: png.clone(),
            message: e.to_string(),
        })?;
    Ok((csv, png))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity >= 1.0 && self.perplexity.is_finite()) {
            return Err(Error::invalid("perplexity must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("t-SNE learning_rate must be > 0"));
        }
        if !(self.early_exaggeration >= 1.0 && self.early_exaggeration.is_finite()) {
            return Err(Error::invalid("early_exaggeration must be >= 1"));
        }
        Ok(())
    }

    /// Perplexity actually used for `n` points: the configured value capped at `(n - 1) / 3`.
    pub fn effective_perplexity(&self, n: usize) -> Result<f64> {
        let cap = (n as f64 - 1.0) / 3.0;
        let p = self.perplexity.min(cap);
        if p < 1.0 {
            return Err(Error::invalid(format!(
                "t-SNE needs at least 4 points (perplexity is capped at (n - 1) / 3 and must be >= 1); got {n}"
            )));
        }
        Ok(p)
    }
}

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gram = x.dot(&x.t());
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            (norms[i] + norms[j] - 2.0 * gram[[i, j]]).max(0.0)
        }
    })
}

/// Row-conditional affinities with per-row precision found by bisection on the entropy.
fn conditional_affinities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d2.nrows();
    let target = perplexity.ln();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
            let mut p = vec![0.0; n];
            for _ in 0..200 {
                let dmin = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| d2[[i, j]])
                    .fold(f64::INFINITY, f64::min);
                let mut sum = 0.0;
                let mut weighted = 0.0;
                for j in 0..n {
                    p[j] = if j == i {
                        0.0
                    } else {
                        (-(d2[[i, j]] - dmin) * beta).exp()
                    };
                    sum += p[j];
                    weighted += p[j] * (d2[[i, j]] - dmin);
                }
                let entropy = sum.ln() + beta * weighted / sum;
                p.iter_mut().for_each(|v| *v /= sum);
                let diff = entropy - target;
                if diff.abs() < 1e-6 {
                    break;
                }
                if diff > 0.0 {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
            }
            p
        })
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| rows[i][j])
}

/// Exact t-SNE to two dimensions. Identical inputs collapse to the origin.
pub fn tsne(features: &Array2<f32>, config: &TsneConfig, seed: u64) -> Result<Array2<f64>> {
    config.validate()?;
    let n = features.nrows();
    let perplexity = config.effective_perplexity(n)?;
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features contain non-finite values"));
    }
    let x = features.mapv(|v| v as f64);
    let d2 = squared_distances(&x);
    let scale = d2.iter().copied().fold(0.0, f64::max);
    if scale <= 1e-12 {
        return Ok(Array2::zeros((n, 2)));
    }
    // Scale-free bisection start.
    let d2 = d2 / scale;
    let cond = conditional_affinities(&d2, perplexity);
    let mut p = (&cond + &cond.t()) / (2.0 * n as f64);
    p.mapv_inplace(|v| v.max(1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1e-4).expect("valid normal");
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));

    for it in 0..config.iterations {
        let exaggeration = if it < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < config.exaggeration_iterations { 0.5 } else { 0.8 };
        let num = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                0.0
            } else {
                let dy0 = y[[i, 0]] - y[[j, 0]];
                let dy1 = y[[i, 1]] - y[[j, 1]];
                1.0 / (1.0 + dy0 * dy0 + dy1 * dy1)
            }
        });
        let z = num.sum().max(1e-300);
        let grad_rows: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = (exaggeration * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
                    g[0] += 4.0 * w * (y[[i, 0]] - y[[j, 0]]);
                    g[1] += 4.0 * w * (y[[i, 1]] - y[[j, 1]]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for k in 0..2 {
                let g = grad_rows[i][k];
                let gain = &mut gains[[i, k]];
                *gain = if (g > 0.0) != (velocity[[i, k]] > 0.0) {
                    *gain + 0.2
                } else {
                    (*gain * 0.8).max(0.01)
                };
                velocity[[i, k]] = momentum * velocity[[i, k]] - config.learning_rate * *gain * g;
                y[[i, k]] += velocity[[i, k]];
            }
        }
        let mean = y.mean_axis(Axis(0)).expect("non-empty");
        y -= &mean;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: it as u64,
                what: "t-SNE coordinates".into(),
            });
        }
    }
    Ok(y)
}

pub fn embedding_csv(coords: &Array2<f64>, record_indices: &[usize], labels: &[Option<u32>]) -> String {
    let mut out = format!("{EMBEDDING_CSV_HEADER}\n");
    for (i, row) in coords.rows().into_iter().enumerate() {
        let label = labels
            .get(i)
            .copied()
            .flatten()
            .map(|l| l.to_string())
            .unwrap_or_default();
        writeln!(out, "{},{},{},{label}", record_indices[i], row[0], row[1]).expect("write to string");
    }
    out
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// Square scatter plot of 2-D coordinates, points coloured by label (grey when unlabeled).
pub fn scatter_image(coords: &Array2<f64>, labels: &[Option<u32>], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let margin = 12.0;
    let span = size as f64 - 2.0 * margin;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for row in coords.rows() {
        for k in 0..2 {
            lo[k] = lo[k].min(row[k]);
            hi[k] = hi[k].max(row[k]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    for (i, row) in coords.rows().into_iter().enumerate() {
        let px = margin + (row[0] - lo[0]) / extent * span;
        let py = margin + (hi[1] - row[1]) / extent * span;
        let colour = match labels.get(i).copied().flatten() {
            Some(l) => PALETTE[l as usize % PALETTE.len()],
            None => [128, 128, 128],
        };
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                if dx * dx + dy * dy > 9 {
                    continue;
                }
                let (x, y) = (px.round() as i64 + dx, py.round() as i64 + dy);
                if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                    img.put_pixel(x as u32, y as u32, Rgb(colour));
                }
            }
        }
    }
    img
}

/// t-SNE of `features`, written as a scatter PNG at `out_png` and coordinates CSV next to it
/// (same stem, `.csv`). Returns the coordinates and the CSV path.
pub fn embedding_plot(
    features: &Array2<f32>,
    labels: &[Option<u32>],
    record_indices: &[usize],
    out_png: &Path,
    config: &TsneConfig,
    seed: u64,
) -> Result<(Array2<f64>, PathBuf)> {
    let n = features.nrows();
    if labels.len() != n || record_indices.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows but {} labels and {} indices",
            labels.len(),
            record_indices.len()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("an embedding plot needs at least two rows"));
    }
    let coords = tsne(features, config, seed)?;
    if let Some(parent) = out_png.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    scatter_image(&coords, labels, 512)
        .save(out_png)
        .map_err(|e| Error::Image {
            path: out_png.to_path_buf(),
            message: e.to_string(),
        })?;
    let csv = out_png.with_extension("csv");
    fs::write(&csv, embedding_csv(&coords, record_indices, labels)).map_err(|e| Error::io(&csv, e))?;
    Ok((coords, csv))
}
