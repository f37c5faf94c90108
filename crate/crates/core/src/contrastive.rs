//! Cosine similarity and the NT-Xent contrastive loss with its analytic gradient.
//!
//! For a batch of `N = 2B` projections `z` with positive partner `p(i)` and temperature `t`,
//! the per-view loss is
//!
//! ```text
//! l(i) = -log( exp(sim(z_i, z_p(i)) / t) / sum_{k != i} exp(sim(z_i, z_k) / t) )
//! ```
//!
//! and the batch loss is the mean of `l(i)` over all `N` views, i.e. over both orderings of
//! every positive pair.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Similarity used inside the loss. Only cosine similarity is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
}

#[derive(Debug, Clone)]
pub struct ProjectionBatch {
    pub z: Array2<f64>,
    pub pair_index: Vec<(usize, usize)>,
    pub temperature: f64,
}

impl ProjectionBatch {
    pub fn new(z: Array2<f64>, pair_index: Vec<(usize, usize)>, temperature: f64) -> Result<Self> {
        let batch = Self {
            z,
            pair_index,
            temperature,
        };
        batch.partners()?;
        Ok(batch)
    }

    /// Batch with the conventional pairing `(0,1), (2,3), ...`.
    pub fn consecutive(z: Array2<f64>, temperature: f64) -> Result<Self> {
        let n = z.nrows();
        let pairs = (0..n / 2).map(|i| (2 * i, 2 * i + 1)).collect();
        Self::new(z, pairs, temperature)
    }

    pub fn num_views(&self) -> usize {
        self.z.nrows()
    }

    /// Partner of every view, validating that `pair_index` is a perfect matching.
    fn partners(&self) -> Result<Vec<usize>> {
        let n = self.z.nrows();
        if n == 0 || n % 2 != 0 {
            return Err(Error::Shape(format!(
                "projection batch needs an even, non-zero row count, got {n}"
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.pair_index.len() * 2 != n {
            return Err(Error::invalid(format!(
                "{} pairs cannot cover {n} views",
                self.pair_index.len()
            )));
        }
        let mut partner = vec![usize::MAX; n];
        for &(i, j) in &self.pair_index {
            if i >= n || j >= n || i == j || partner[i] != usize::MAX || partner[j] != usize::MAX {
                return Err(Error::invalid(format!("pair ({i}, {j}) breaks the perfect matching")));
            }
            partner[i] = j;
            partner[j] = i;
        }
        Ok(partner)
    }
}

pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::invalid("cosine similarity of a zero-norm vector"));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Unit-normalised rows and the original norms.
fn normalize_rows(z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = z.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if let Some(bad) = norms.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::invalid(format!(
            "projection row {bad} has zero or non-finite norm"
        )));
    }
    let unit = z / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Log-softmax pieces of row `i` of the scaled similarity matrix, excluding the diagonal.
fn row_log_partition(logits: &Array2<f64>, i: usize) -> f64 {
    let row = logits.row(i);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + sum.ln()
}

fn scaled_similarities(batch: &ProjectionBatch) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
    let (unit, norms) = normalize_rows(&batch.z)?;
    let logits = unit.dot(&unit.t()) / batch.temperature;
    Ok((logits, unit, norms))
}

/// Loss of the ordered positive pair `(i, j)`; the denominator runs over every view except `i`.
pub fn nt_xent_pair_loss(batch: &ProjectionBatch, i: usize, j: usize) -> Result<f64> {
    let partner = batch.partners()?;
    if i >= partner.len() || partner[i] != j {
        return Err(Error::invalid(format!("({i}, {j}) is not a positive pair")));
    }
    let (logits, _, _) = scaled_similarities(batch)?;
    Ok((row_log_partition(&logits, i) - logits[[i, j]]).max(0.0))
}

/// Mean loss over all `2B` ordered positive pairs.
pub fn nt_xent_batch_loss(batch: &ProjectionBatch) -> Result<f64> {
    let partner = batch.partners()?;
    let (logits, _, _) = scaled_similarities(batch)?;
    let n = partner.len();
    let total: f64 = (0..n)
        .map(|i| (row_log_partition(&logits, i) - logits[[i, partner[i]]]).max(0.0))
        .sum();
    Ok(total / n as f64)
}

/// Batch loss together with its exact gradient with respect to `z`.
pub fn nt_xent_loss_and_grad(batch: &ProjectionBatch) -> Result<(f64, Array2<f64>)> {
    let partner = batch.partners()?;
    let (logits, unit, norms) = scaled_similarities(batch)?;
    let n = partner.len();

    // d loss / d logits, with a zero diagonal.
    let mut dlogits = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        let log_z = row_log_partition(&logits, i);
        total += (log_z - logits[[i, partner[i]]]).max(0.0);
        for k in 0..n {
            if k != i {
                dlogits[[i, k]] = (logits[[i, k]] - log_z).exp() / n as f64;
            }
        }
        dlogits[[i, partner[i]]] -= 1.0 / n as f64;
    }

    // logits = U U^T / t, so dL/dU = (G + G^T) U / t.
    let sym = &dlogits + &dlogits.t();
    let dunit = sym.dot(&unit) / batch.temperature;

    // Project out the radial component and undo the normalisation.
    let radial = (&dunit * &unit).sum_axis(Axis(1));
    let mut grad = &dunit - &(&unit * &radial.view().insert_axis(Axis(1)));
    grad /= &norms.view().insert_axis(Axis(1));
    Ok((total / n as f64, grad))
}

pub fn nt_xent_gradient(batch: &ProjectionBatch) -> Result<Array2<f64>> {
    nt_xent_loss_and_grad(batch).map(|(_, g)| g)
}
