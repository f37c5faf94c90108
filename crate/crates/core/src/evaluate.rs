//! Linear-probe evaluation of frozen features.
//!
//! A class-weighted, L2-regularised logistic regression is fitted for every value of a small
//! grid of inverse regularisation strengths `C`; the value with the best validation AUC is kept
//! and scored on a held-out test fold. Cross-validation folds are grouped by patient.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    check_patient_disjoint, grouped_stratified_split, stratified_group_kfold, subsample_size, DatasetManifest, Split,
};
use crate::error::{Error, Result};
use crate::model::{FeatureTap, ModelParameters};
use crate::pretrain::{derive_seed, load_batch, pretrain, stack_images, ImageSource, PretrainSetup, Subset};

pub const REPORT_CSV_HEADER: &str = "dataset,fraction,fold,C,acc,auc,sen,spe";
pub const DECISION_THRESHOLD: f64 = 0.5;
const GRAD_TOL: f64 = 1e-6;
const MAX_NEWTON: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    #[default]
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Auc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub c_grid: Vec<f64>,
    pub class_weighting: ClassWeighting,
    pub selection_metric: SelectionMetric,
    /// Standardise features with training-set mean and deviation before fitting.
    pub standardize: bool,
    pub folds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![0.01, 0.05, 0.1, 0.2, 0.5, 1.0],
            class_weighting: ClassWeighting::Balanced,
            selection_metric: SelectionMetric::Auc,
            standardize: true,
            folds: 5,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() {
            return Err(Error::invalid("c_grid must not be empty"));
        }
        if let Some(c) = self.c_grid.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(Error::invalid(format!("every C must be positive, got {c}")));
        }
        if self.folds < 2 {
            return Err(Error::invalid("folds must be >= 2"));
        }
        Ok(())
    }
}

fn check_binary(labels: &[u32]) -> Result<()> {
    match labels.iter().find(|&&l| l > 1) {
        Some(l) => Err(Error::invalid(format!("labels must be 0 or 1, got {l}"))),
        None => Ok(()),
    }
}

/// Balanced class weights `[w_0, w_1]` with `w_c = N / (2 N_c)`.
pub fn class_weights(labels: &[u32]) -> Result<[f64; 2]> {
    check_binary(labels)?;
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::invalid("training labels contain a single class"));
    }
    Ok([n / (2.0 * neg), n / (2.0 * pos)])
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Logistic<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [f64],
    s: &'a [f64],
    c: f64,
}

impl Logistic<'_> {
    fn margins(&self, w: &Array1<f64>, b: f64) -> Array1<f64> {
        self.x.dot(w) + b
    }

    fn objective(&self, w: &Array1<f64>, b: f64) -> f64 {
        let z = self.margins(w, b);
        let loss: f64 = z
            .iter()
            .zip(self.y)
            .zip(self.s)
            .map(|((&z, &y), &s)| s * (softplus(z) - y * z))
            .sum();
        0.5 * w.dot(w) + self.c * loss
    }

    /// Gradient `(g_w, g_b)` and the Hessian diagonal weights `C s p (1 - p)`.
    fn gradient(&self, w: &Array1<f64>, b: f64) -> (Array1<f64>, f64, Array1<f64>) {
        let z = self.margins(w, b);
        let n = z.len();
        let mut r = Array1::zeros(n);
        let mut h = Array1::zeros(n);
        for i in 0..n {
            let p = sigmoid(z[i]);
            r[i] = self.c * self.s[i] * (p - self.y[i]);
            h[i] = self.c * self.s[i] * p * (1.0 - p);
        }
        (w + &self.x.t().dot(&r), r.sum(), h)
    }

    fn hess_vec(&self, h: &Array1<f64>, vw: &Array1<f64>, vb: f64) -> (Array1<f64>, f64) {
        let u = (self.x.dot(vw) + vb) * h;
        (vw + &self.x.t().dot(&u), u.sum())
    }
}

/// Minimises `0.5 |w|^2 + C sum_i s_i logloss(y_i, w.x_i + b)` by truncated Newton with a
/// backtracking line search, until the gradient norm drops below 1e-6.
pub fn fit_logistic(x: ArrayView2<f64>, labels: &[u32], sample_weights: &[f64], c: f64) -> Result<(Array1<f64>, f64)> {
    let (n, d) = x.dim();
    if labels.len() != n || sample_weights.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows but {} labels and {} weights",
            labels.len(),
            sample_weights.len()
        )));
    }
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let prob = Logistic {
        x,
        y: &y,
        s: sample_weights,
        c,
    };
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let mut f = prob.objective(&w, b);
    for _ in 0..MAX_NEWTON {
        let (gw, gb, h) = prob.gradient(&w, b);
        let gnorm = (gw.dot(&gw) + gb * gb).sqrt();
        if !gnorm.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                what: "logistic regression gradient".into(),
            });
        }
        if gnorm < GRAD_TOL {
            return Ok((w, b));
        }
        // Conjugate gradients on H p = -g.
        let (mut pw, mut pb) = (Array1::<f64>::zeros(d), 0.0);
        let (mut rw, mut rb) = (-&gw, -gb);
        let (mut dw, mut db) = (rw.clone(), rb);
        let mut rr = rw.dot(&rw) + rb * rb;
        let stop = (0.5f64.min(gnorm.sqrt()) * gnorm).powi(2);
        for _ in 0..2 * (d + 1) {
            if rr <= stop {
                break;
            }
            let (qw, qb) = prob.hess_vec(&h, &dw, db);
            let curv = dw.dot(&qw) + db * qb;
            if curv <= 0.0 || !curv.is_finite() {
                break;
            }
            let alpha = rr / curv;
            pw.scaled_add(alpha, &dw);
            pb += alpha * db;
            rw.scaled_add(-alpha, &qw);
            rb -= alpha * qb;
            let rr_new = rw.dot(&rw) + rb * rb;
            dw = &rw + &(&dw * (rr_new / rr));
            db = rb + db * (rr_new / rr);
            rr = rr_new;
        }
        if pw.iter().all(|v| *v == 0.0) && pb == 0.0 {
            pw = -&gw;
            pb = -gb;
        }
        let slope = gw.dot(&pw) + gb * pb;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let w_new = &w + &(&pw * step);
            let b_new = b + step * pb;
            let f_new = prob.objective(&w_new, b_new);
            if f_new <= f + 1e-4 * step * slope {
                w = w_new;
                b = b_new;
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let (gw, gb, _) = prob.gradient(&w, b);
    let gnorm = (gw.dot(&gw) + gb * gb).sqrt();
    if gnorm < GRAD_TOL {
        Ok((w, b))
    } else {
        Err(Error::invalid(format!(
            "logistic regression did not converge (C = {c}, |g| = {gnorm:e})"
        )))
    }
}

/// A logistic-regression probe over (optionally standardised) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedProbe {
    pub c: f64,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Validation AUC for every grid value, in grid order.
    pub grid: Vec<(f64, Option<f64>)>,
}

impl FittedProbe {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Positive-class logit for each row.
    pub fn logit(&self, features: &Array2<f32>) -> Result<Array1<f64>> {
        if features.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "probe expects {} features, got {}",
                self.dim(),
                features.ncols()
            )));
        }
        Ok(features
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| (v as f64 - self.mean[j]) / self.scale[j] * self.weights[j])
                    .sum::<f64>()
                    + self.intercept
            })
            .collect())
    }

    pub fn predict_proba(&self, features: &Array2<f32>) -> Result<Array1<f64>> {
        Ok(self.logit(features)?.mapv(sigmoid))
    }

    /// Gradient of the logit with respect to the raw features (constant, the probe is linear).
    pub fn logit_gradient(&self) -> Array1<f64> {
        self.weights.iter().zip(&self.scale).map(|(w, s)| w / s).collect()
    }
}

fn to_f64(x: &Array2<f32>) -> Array2<f64> {
    x.mapv(|v| v as f64)
}

fn check_features(x: &Array2<f32>, labels: &[u32], what: &str) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{what}: {} rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} features contain non-finite values")));
    }
    check_binary(labels)
}

/// Fits one probe per grid value on the training set and keeps the value with the best
/// validation AUC. Ties, and grids where no validation AUC is defined, go to the smallest C.
pub fn fit_linear_probe(
    train_x: &Array2<f32>,
    train_y: &[u32],
    val_x: &Array2<f32>,
    val_y: &[u32],
    config: &ProbeConfig,
) -> Result<FittedProbe> {
    config.validate()?;
    check_features(train_x, train_y, "training")?;
    check_features(val_x, val_y, "validation")?;
    if val_x.ncols() != train_x.ncols() {
        return Err(Error::Shape("training and validation feature widths differ".into()));
    }
    if val_y.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let cw = class_weights(train_y)?;
    let d = train_x.ncols();
    let xt = to_f64(train_x);
    let (mean, scale) = if config.standardize {
        let mean = xt.mean_axis(Axis(0)).expect("non-empty");
        let sd = xt.std_axis(Axis(0), 0.0);
        (
            mean.to_vec(),
            sd.iter().map(|&s| if s > 1e-12 { s } else { 1.0 }).collect(),
        )
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let mut z = xt;
    for mut row in z.rows_mut() {
        for j in 0..d {
            row[j] = (row[j] - mean[j]) / scale[j];
        }
    }
    let sw: Vec<f64> = train_y.iter().map(|&l| cw[l as usize]).collect();

    let fits: Vec<(f64, Array1<f64>, f64)> = config
        .c_grid
        .par_iter()
        .map(|&c| fit_logistic(z.view(), train_y, &sw, c).map(|(w, b)| (c, w, b)))
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, Option<f64>)> = None;
    let mut grid = Vec::with_capacity(fits.len());
    for (i, (c, w, b)) in fits.iter().enumerate() {
        let probe = FittedProbe {
            c: *c,
            weights: w.to_vec(),
            intercept: *b,
            mean: mean.clone(),
            scale: scale.clone(),
            grid: Vec::new(),
        };
        let auc = rank_auc(probe.logit(val_x)?.as_slice().expect("contiguous"), val_y)?;
        grid.push((*c, auc));
        let better = match best {
            None => true,
            Some((bi, bauc)) => match (auc, bauc) {
                (Some(a), Some(b)) => a > b + 1e-12 || ((a - b).abs() <= 1e-12 && *c < fits[bi].0),
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => *c < fits[bi].0,
            },
        };
        if better {
            best = Some((i, auc));
        }
    }
    let (bi, _) = best.expect("grid is non-empty");
    let (c, w, b) = &fits[bi];
    Ok(FittedProbe {
        c: *c,
        weights: w.to_vec(),
        intercept: *b,
        mean,
        scale,
        grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub acc: f64,
    pub auc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
}

/// Area under the ROC curve as a rank statistic, with tied scores counted one half.
/// `None` when either class is absent.
pub fn rank_auc(scores: &[f64], labels: &[u32]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_binary(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied runs share their average rank.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok(Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q)))
}

pub fn compute_metrics(scores: &[f64], predictions: &[u32], labels: &[u32]) -> Result<MetricSet> {
    if labels.is_empty() {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    check_binary(predictions)?;
    let auc = rank_auc(scores, labels)?;
    let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fp += 1,
            _ => fne += 1,
        }
    }
    let ratio = |a: usize, b: usize| {
        if a + b == 0 {
            None
        } else {
            Some(a as f64 / (a + b) as f64)
        }
    };
    Ok(MetricSet {
        acc: (tp + tn) as f64 / labels.len() as f64,
        auc,
        sen: ratio(tp, fne),
        spe: ratio(tn, fp),
    })
}

/// Mean (or deviation) of each metric over the folds where it is defined.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSource {
    GroupedKFold,
    PreSpecified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub c: f64,
    pub validation_auc: Option<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub fraction: f64,
    pub checkpoint_id: String,
    pub feature_tap: FeatureTap,
    pub config_digest: String,
    pub split_source: SplitSource,
    pub k: usize,
    pub folds: Vec<FoldResult>,
    pub mean: MetricSummary,
    /// Sample standard deviation across folds.
    pub sd: MetricSummary,
    pub warnings: Vec<String>,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), sd)
}

/// Mean and sample standard deviation of every metric across folds.
pub fn aggregate(folds: &[FoldResult]) -> (MetricSummary, MetricSummary) {
    let pick = |f: fn(&MetricSet) -> Option<f64>| -> Vec<f64> { folds.iter().filter_map(|r| f(&r.metrics)).collect() };
    let (acc_m, acc_s) = mean_sd(&pick(|m| Some(m.acc)));
    let (auc_m, auc_s) = mean_sd(&pick(|m| m.auc));
    let (sen_m, sen_s) = mean_sd(&pick(|m| m.sen));
    let (spe_m, spe_s) = mean_sd(&pick(|m| m.spe));
    (
        MetricSummary {
            acc: acc_m,
            auc: auc_m,
            sen: sen_m,
            spe: spe_m,
        },
        MetricSummary {
            acc: acc_s,
            auc: auc_s,
            sen: sen_s,
            spe: spe_s,
        },
    )
}

fn rows(x: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    x.select(Axis(0), idx)
}

fn evaluate_fold(
    features: &Array2<f32>,
    labels: &[u32],
    fold: usize,
    (train, val, test): (&[usize], &[usize], &[usize]),
    probe: &ProbeConfig,
) -> Result<(FoldResult, Option<String>)> {
    let pick = |idx: &[usize]| -> Vec<u32> { idx.iter().map(|&i| labels[i]).collect() };
    let fitted = fit_linear_probe(
        &rows(features, train),
        &pick(train),
        &rows(features, val),
        &pick(val),
        probe,
    )?;
    let validation_auc = fitted.grid.iter().find(|(c, _)| *c == fitted.c).and_then(|(_, a)| *a);
    let test_y = pick(test);
    let proba = fitted.predict_proba(&rows(features, test))?;
    let preds: Vec<u32> = proba.iter().map(|&p| u32::from(p >= DECISION_THRESHOLD)).collect();
    let metrics = compute_metrics(proba.as_slice().expect("contiguous"), &preds, &test_y)?;
    let warning = validation_auc.is_none().then(|| {
        format!(
            "fold {fold}: validation set has a single class, C fell back to {}",
            fitted.c
        )
    });
    Ok((
        FoldResult {
            fold,
            c: fitted.c,
            validation_auc,
            n_train: train.len(),
            n_val: val.len(),
            n_test: test.len(),
            metrics,
        },
        warning,
    ))
}

/// Cross-validated linear-probe evaluation.
///
/// Manifests whose records all carry train/val/test tags are evaluated once on those splits.
/// Otherwise records are partitioned into `k` patient-grouped, class-stratified folds; for each
/// test fold the remaining records are split 7:1 (by patient) into training and validation.
pub fn cross_validate(
    features: &Array2<f32>,
    manifest: &DatasetManifest,
    k: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<EvaluationReport> {
    probe.validate()?;
    if features.nrows() != manifest.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} manifest records",
            features.nrows(),
            manifest.len()
        )));
    }
    let labels = manifest.labels()?;
    check_binary(&labels)?;

    let (split_source, roles): (SplitSource, Vec<[Vec<usize>; 3]>) = match manifest.splits_assigned() {
        None => return Err(Error::invalid("manifest mixes tagged and untagged records")),
        Some(true) => {
            let roles = [Split::Train, Split::Val, Split::Test].map(|s| manifest.indices_with_split(s));
            if let Some(empty) = roles.iter().position(|r| r.is_empty()) {
                return Err(Error::invalid(format!(
                    "pre-specified {} split is empty",
                    [Split::Train, Split::Val, Split::Test][empty]
                )));
            }
            (SplitSource::PreSpecified, vec![roles])
        }
        Some(false) => {
            let folds = stratified_group_kfold(manifest, k, seed)?;
            let roles = folds
                .iter()
                .map(|f| {
                    let rest: Vec<usize> = folds
                        .iter()
                        .filter(|o| o.fold_id != f.fold_id)
                        .flat_map(|o| o.record_indices.iter().copied())
                        .collect();
                    let mut rest = rest;
                    rest.sort_unstable();
                    let parts = grouped_stratified_split(
                        manifest,
                        &rest,
                        &[7.0 / 8.0, 1.0 / 8.0],
                        derive_seed(seed, &[10, f.fold_id as u64]),
                    )?;
                    let [train, val]: [Vec<usize>; 2] = parts.try_into().expect("two bins");
                    Ok([train, val, f.record_indices.clone()])
                })
                .collect::<Result<_>>()?;
            (SplitSource::GroupedKFold, roles)
        }
    };
    for [train, val, test] in &roles {
        check_patient_disjoint(manifest, &[("train", train), ("val", val), ("test", test)])?;
    }

    let results: Vec<(FoldResult, Option<String>)> = roles
        .par_iter()
        .enumerate()
        .map(|(fold, [train, val, test])| evaluate_fold(features, &labels, fold, (train, val, test), probe))
        .collect::<Result<_>>()?;
    let warnings = results.iter().filter_map(|(_, w)| w.clone()).collect();
    let folds: Vec<FoldResult> = results.into_iter().map(|(f, _)| f).collect();
    let (mean, sd) = aggregate(&folds);
    Ok(EvaluationReport {
        dataset: manifest.name.clone(),
        fraction: 1.0,
        checkpoint_id: String::new(),
        feature_tap: FeatureTap::default(),
        config_digest: String::new(),
        split_source,
        k: folds.len(),
        folds,
        mean,
        sd,
        warnings,
    })
}

/// Percent label for a pretext fraction: `0.01 -> "1%"`.
pub fn fraction_tag(fraction: f64) -> String {
    let pct = (fraction * 100.0 * 1e6).round() / 1e6;
    format!("{pct}%")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-fold rows and one `mean` row for every report.
pub fn report_csv(reports: &[EvaluationReport]) -> Result<String> {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        if r.dataset.contains([',', '\n', '"']) {
            return Err(Error::invalid(format!(
                "dataset name `{}` cannot be written to CSV",
                r.dataset
            )));
        }
        let tag = fraction_tag(r.fraction);
        for f in &r.folds {
            let m = &f.metrics;
            writeln!(
                out,
                "{},{tag},{},{},{},{},{},{}",
                r.dataset,
                f.fold,
                f.c,
                m.acc,
                fmt_opt(m.auc),
                fmt_opt(m.sen),
                fmt_opt(m.spe)
            )
            .expect("write to string");
        }
        let m = &r.mean;
        writeln!(
            out,
            "{},{tag},mean,,{},{},{},{}",
            r.dataset,
            fmt_opt(m.acc),
            fmt_opt(m.auc),
            fmt_opt(m.sen),
            fmt_opt(m.spe)
        )
        .expect("write to string");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldLabel {
    Index(usize),
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub fraction: String,
    pub fold: FoldLabel,
    pub c: Option<f64>,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let bad = |m: String| Error::format("report CSV", m);
    let mut lines = text.strip_prefix('\u{feff}').unwrap_or(text).lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == REPORT_CSV_HEADER => {}
        Some(h) => return Err(bad(format!("unexpected header `{h}`"))),
        None => return Err(bad("empty file".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(format!("row {row}: expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            let v: f64 = s.parse().map_err(|_| bad(format!("row {row}: bad {what} `{s}`")))?;
            if !v.is_finite() {
                return Err(bad(format!("row {row}: {what} is not finite")));
            }
            Ok(Some(v))
        };
        let fold = match f[2] {
            "mean" => FoldLabel::Mean,
            s => FoldLabel::Index(s.parse().map_err(|_| bad(format!("row {row}: bad fold `{s}`")))?),
        };
        out.push(ReportRow {
            dataset: f[0].to_string(),
            fraction: f[1].to_string(),
            fold,
            c: num(f[3], "C")?,
            acc: num(f[4], "acc")?,
            auc: num(f[5], "auc")?,
            sen: num(f[6], "sen")?,
            spe: num(f[7], "spe")?,
        });
    }
    Ok(out)
}

/// Writes `<stem>.csv` and `<stem>.json` (full reports, including deviations and warnings).
pub fn write_reports(reports: &[EvaluationReport], dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, report_csv(reports)?).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(reports).map_err(|e| Error::format("report JSON", e.to_string()))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn read_reports_json(path: &Path) -> Result<Vec<EvaluationReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("report JSON", e.to_string()))
}

/// Dataset-by-fraction table of mean ACC/AUC/SEN/SPE in percent.
pub fn comparison_table(reports: &[EvaluationReport]) -> String {
    let mut fractions: Vec<f64> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for r in reports {
        if !fractions.contains(&r.fraction) {
            fractions.push(r.fraction);
        }
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    fractions.sort_by(f64::total_cmp);
    let pct = |v: Option<f64>| v.map(|v| format!("{:.1}", v * 100.0)).unwrap_or_else(|| "na".into());
    let mut out = String::from("| Dataset |");
    for f in &fractions {
        let tag = fraction_tag(*f);
        write!(out, " ACC {tag} | AUC {tag} | SEN {tag} | SPE {tag} |").expect("write to string");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(4 * fractions.len()));
    out.push('\n');
    for d in datasets {
        write!(out, "| {d} |").expect("write to string");
        for f in &fractions {
            match reports.iter().find(|r| r.dataset == d && r.fraction == *f) {
                Some(r) => write!(
                    out,
                    " {} | {} | {} | {} |",
                    pct(r.mean.acc),
                    pct(r.mean.auc),
                    pct(r.mean.sen),
                    pct(r.mean.spe)
                ),
                None => write!(out, " na | na | na | na |"),
            }
            .expect("write to string");
        }
        out.push('\n');
    }
    out
}

/// Features of every image in `source`, computed in inference mode in chunks.
pub fn extract_dataset_features(
    params: &ModelParameters,
    source: &dyn ImageSource,
    tap: FeatureTap,
    chunk: usize,
) -> Result<Array2<f32>> {
    if source.is_empty() {
        return Err(Error::invalid("no images to extract features from"));
    }
    let chunk = chunk.max(1);
    let n = source.len();
    let mut out: Option<Array2<f32>> = None;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let images = stack_images(&load_batch(source, &idx)?)?;
        let f = params.extract_features(&images, tap)?;
        let dst = out.get_or_insert_with(|| Array2::zeros((n, f.ncols())));
        dst.slice_mut(s![start..start + idx.len(), ..]).assign(&f);
    }
    Ok(out.expect("at least one chunk"))
}

/// Downstream dataset for evaluation: labels and splits from the manifest, pixels from `images`
/// (row-aligned with the manifest).
pub struct Downstream<'a> {
    pub manifest: &'a DatasetManifest,
    pub images: &'a dyn ImageSource,
}

/// Settings shared by every probe evaluation of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSetup {
    pub probe: ProbeConfig,
    pub tap: FeatureTap,
    pub seed: u64,
    pub config_digest: String,
}

/// Extracts features with `params` and cross-validates a probe on each downstream dataset.
pub fn evaluate_checkpoint(
    params: &ModelParameters,
    checkpoint_id: &str,
    fraction: f64,
    downstream: &[Downstream<'_>],
    setup: &EvalSetup,
) -> Result<Vec<EvaluationReport>> {
    downstream
        .iter()
        .map(|ds| {
            if ds.images.len() != ds.manifest.len() {
                return Err(Error::Shape(format!(
                    "{}: image source and manifest lengths differ",
                    ds.manifest.name
                )));
            }
            let features = extract_dataset_features(params, ds.images, setup.tap, 64)?;
            let mut report = cross_validate(&features, ds.manifest, setup.probe.folds, &setup.probe, setup.seed)?;
            report.fraction = fraction;
            report.checkpoint_id = checkpoint_id.to_string();
            report.feature_tap = setup.tap;
            report.config_digest = setup.config_digest.clone();
            Ok(report)
        })
        .collect()
}

/// Identifier of a trained state: configuration digest prefix and epoch directory.
pub fn checkpoint_id(config_digest: &str, epoch: u32) -> String {
    let short: String = config_digest.chars().take(12).collect();
    format!("{short}/{}", crate::checkpoint::epoch_dir_name(epoch))
}

/// Pretrains on each fraction of `pretext` (same configuration and seed) and evaluates every
/// downstream dataset with the resulting model. Runs are written under
/// `out_dir/fraction_<pct>pct/`.
pub fn fraction_study(
    pretext: &dyn ImageSource,
    fractions: &[f64],
    pretrain_setup: &PretrainSetup,
    downstream: &[Downstream<'_>],
    eval: &EvalSetup,
    out_dir: &Path,
) -> Result<Vec<EvaluationReport>> {
    if fractions.is_empty() {
        return Err(Error::invalid("no fractions given"));
    }
    let mut reports = Vec::new();
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
        }
        let n = pretext.len();
        let indices: Vec<usize> = if fraction == 1.0 {
            (0..n).collect()
        } else {
            let take = subsample_size(n, fraction);
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(
                pretrain_setup.train.seed,
                &[3, fraction.to_bits()],
            ));
            let mut idx = rand::seq::index::sample(&mut rng, n, take).into_vec();
            idx.sort_unstable();
            idx
        };
        if indices.len() < 2 {
            return Err(Error::invalid(format!(
                "fraction {} of {n} pretext images leaves fewer than two images",
                fraction_tag(fraction)
            )));
        }
        let subset = Subset {
            inner: pretext,
            indices,
        };
        let dir = out_dir.join(fraction_dir_name(fraction));
        let outcome = pretrain(&subset, pretrain_setup, &dir, None)?;
        let id = checkpoint_id(&pretrain_setup.config_digest, outcome.state.epoch);
        reports.extend(evaluate_checkpoint(
            &outcome.state.params,
            &id,
            fraction,
            downstream,
            eval,
        )?);
    }
    Ok(reports)
}

pub fn fraction_dir_name(fraction: f64) -> String {
    format!("fraction_{}pct", fraction_tag(fraction).trim_end_matches('%'))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::data::SampleRecord;

    fn brute_auc(scores: &[f64], labels: &[u32]) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn confusion_matrix_example() {
        // TP=3, FN=1, TN=4, FP=2
        let labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let preds = [1, 1, 1, 0, 0, 0, 0, 0, 1, 1];
        let scores: Vec<f64> = preds.iter().map(|&p| p as f64).collect();
        let m = compute_metrics(&scores, &preds, &labels).unwrap();
        assert!((m.sen.unwrap() - 0.75).abs() < 1e-9);
        assert!((m.spe.unwrap() - 4.0 / 6.0).abs() < 1e-9);
        assert!((m.acc - 0.7).abs() < 1e-9);
    }

    #[test]
    fn perfect_and_uninformative_scores() {
        let labels = [0, 0, 1, 1];
        let m = compute_metrics(&[0.1, 0.2, 0.8, 0.9], &labels, &labels).unwrap();
        assert_eq!((m.acc, m.auc, m.sen, m.spe), (1.0, Some(1.0), Some(1.0), Some(1.0)));
        let m = compute_metrics(&[0.3; 4], &[0, 0, 0, 0], &labels).unwrap();
        assert_eq!(m.auc, Some(0.5));
    }

    #[test]
    fn undefined_metrics_are_absent() {
        let m = compute_metrics(&[0.2, 0.4], &[0, 1], &[0, 0]).unwrap();
        assert_eq!((m.sen, m.auc), (None, None));
        assert_eq!(m.spe, Some(0.5));
        let m = compute_metrics(&[0.2, 0.4], &[0, 1], &[1, 1]).unwrap();
        assert_eq!((m.spe, m.auc), (None, None));
        assert!(compute_metrics(&[], &[], &[]).is_err());
        assert!(compute_metrics(&[0.1], &[2], &[1]).is_err());
    }

    #[test]
    fn class_weight_ratio() {
        let mut labels = vec![0u32; 90];
        labels.extend(vec![1u32; 10]);
        let w = class_weights(&labels).unwrap();
        assert!((w[1] / w[0] - 9.0).abs() < 1e-9);
        assert!((w[0] - 100.0 / 180.0).abs() < 1e-12);
        assert!(class_weights(&[1, 1]).is_err());
    }

    fn clusters(n: usize, d: usize, gap: f32, seed: u64) -> (Array2<f32>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let x = Array2::from_shape_fn((n, d), |(i, _)| labels[i] as f32 * gap + rng.random::<f32>() - 0.5);
        (x, labels)
    }

    #[test]
    fn separable_clusters_pick_smallest_c() {
        let (tx, ty) = clusters(60, 4, 5.0, 1);
        let (vx, vy) = clusters(20, 4, 5.0, 2);
        let p = fit_linear_probe(&tx, &ty, &vx, &vy, &ProbeConfig::default()).unwrap();
        assert!(p.grid.iter().all(|(_, a)| *a == Some(1.0)));
        assert_eq!(p.c, 0.01);
    }

    #[test]
    fn random_labels_give_chance_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2000;
        let x = Array2::from_shape_fn((n, 3), |_| rng.random::<f32>());
        let y: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let (tx, ty) = (x.slice(s![..1000, ..]).to_owned(), &y[..1000]);
        let (vx, vy) = (x.slice(s![1000.., ..]).to_owned(), &y[1000..]);
        let p = fit_linear_probe(&tx, ty, &vx, vy, &ProbeConfig::default()).unwrap();
        let auc = rank_auc(p.logit(&vx).unwrap().as_slice().unwrap(), vy)
            .unwrap()
            .unwrap();
        // Standard error of AUC with 500 per class is about 0.013.
        assert!((auc - 0.5).abs() < 0.07, "auc {auc}");
    }

    #[test]
    fn solver_reaches_stationary_point() {
        let (x, y) = clusters(80, 5, 1.0, 3);
        let x = to_f64(&x);
        let s: Vec<f64> = (0..80).map(|i| 1.0 + (i % 3) as f64).collect();
        for c in [0.01, 1.0, 100.0] {
            let (w, b) = fit_logistic(x.view(), &y, &s, c).unwrap();
            let yf: Vec<f64> = y.iter().map(|&l| l as f64).collect();
            let prob = Logistic {
                x: x.view(),
                y: &yf,
                s: &s,
                c,
            };
            let (gw, gb, _) = prob.gradient(&w, b);
            assert!((gw.dot(&gw) + gb * gb).sqrt() < 1e-6);
            // Any perturbation increases the objective.
            let f = prob.objective(&w, b);
            assert!(prob.objective(&(&w + 1e-3), b) > f);
            assert!(prob.objective(&w, b - 1e-3) > f);
        }
    }

    #[test]
    fn probe_gradient_matches_logit() {
        let (tx, ty) = clusters(40, 3, 2.0, 8);
        let p = fit_linear_probe(&tx, &ty, &tx, &ty, &ProbeConfig::default()).unwrap();
        let g = p.logit_gradient();
        let base = p.logit(&tx.slice(s![0..1, ..]).to_owned()).unwrap()[0];
        let mut moved = tx.slice(s![0..1, ..]).to_owned();
        moved[[0, 1]] += 0.5;
        let after = p.logit(&moved).unwrap()[0];
        assert!((after - base - 0.5 * g[1]).abs() < 1e-5);
    }

    fn manifest_from_labels(labels: &[u32], per_patient: usize) -> DatasetManifest {
        DatasetManifest::new(
            "toy",
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| SampleRecord {
                    image_path: format!("{i}.png").into(),
                    label: Some(l),
                    patient_id: format!("p{}_{}", l, i / per_patient),
                    split: Split::Unassigned,
                })
                .collect(),
        )
    }

    #[test]
    fn five_folds_over_hundred_records() {
        let (x, y) = clusters(100, 3, 3.0, 11);
        let m = manifest_from_labels(&y, 1);
        let r = cross_validate(&x, &m, 5, &ProbeConfig::default(), 4).unwrap();
        assert_eq!(r.folds.len(), 5);
        assert_eq!(r.split_source, SplitSource::GroupedKFold);
        for f in &r.folds {
            assert_eq!(f.n_test, 20);
            assert_eq!(f.n_train + f.n_val, 80);
            assert_eq!(f.n_val, 10);
        }
        assert!(r.mean.auc.unwrap() > 0.99);
        let (mean, sd) = aggregate(&r.folds);
        assert_eq!((mean, sd), (r.mean, r.sd));
    }

    #[test]
    fn pre_specified_splits_are_used_verbatim() {
        let (x, y) = clusters(30, 3, 3.0, 12);
        let mut m = manifest_from_labels(&y, 1);
        for (i, r) in m.records.iter_mut().enumerate() {
            r.split = match i {
                0..=19 => Split::Train,
                20..=23 => Split::Val,
                _ => Split::Test,
            };
        }
        let r = cross_validate(&x, &m, 5, &ProbeConfig::default(), 4).unwrap();
        assert_eq!(r.split_source, SplitSource::PreSpecified);
        assert_eq!(r.k, 1);
        assert_eq!((r.folds[0].n_train, r.folds[0].n_val, r.folds[0].n_test), (20, 4, 6));
        m.records[0].split = Split::Unassigned;
        assert!(cross_validate(&x, &m, 5, &ProbeConfig::default(), 4).is_err());
    }

    #[test]
    fn report_csv_roundtrip_and_aggregates() {
        let (x, y) = clusters(60, 3, 1.0, 13);
        let m = manifest_from_labels(&y, 2);
        let mut r = cross_validate(
            &x,
            &m,
            3,
            &ProbeConfig {
                folds: 3,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        r.fraction = 0.1;
        let csv = report_csv(std::slice::from_ref(&r)).unwrap();
        let rows = parse_report_csv(&csv).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|row| row.fraction == "10%"));
        let aucs: Vec<f64> = rows
            .iter()
            .filter(|r| r.fold != FoldLabel::Mean)
            .map(|r| r.auc.unwrap())
            .collect();
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let agg = rows.iter().find(|r| r.fold == FoldLabel::Mean).unwrap();
        assert!((agg.auc.unwrap() - mean).abs() < 1e-12);
        assert!(parse_report_csv("a,b\n").is_err());
        assert!(parse_report_csv(&format!("{REPORT_CSV_HEADER}\nx,1%,zero,,,,,\n")).is_err());
    }

    #[test]
    fn fraction_tags() {
        assert_eq!(fraction_tag(0.01), "1%");
        assert_eq!(fraction_tag(0.1), "10%");
        assert_eq!(fraction_tag(1.0), "100%");
        assert_eq!(fraction_dir_name(0.01), "fraction_1pct");
    }

    #[test]
    fn comparison_table_layout() {
        let base = EvaluationReport {
            dataset: "cell".into(),
            fraction: 0.01,
            checkpoint_id: String::new(),
            feature_tap: FeatureTap::ProjectionOutput,
            config_digest: String::new(),
            split_source: SplitSource::GroupedKFold,
            k: 0,
            folds: vec![],
            mean: MetricSummary {
                acc: Some(0.856),
                auc: Some(0.966),
                sen: None,
                spe: Some(0.5),
            },
            sd: MetricSummary::default(),
            warnings: vec![],
        };
        let other = EvaluationReport {
            fraction: 1.0,
            ..base.clone()
        };
        let t = comparison_table(&[other, base]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("| Dataset | ACC 1% |"));
        assert!(lines[2].starts_with("| cell | 85.6 | 96.6 | na | 50.0 |"));
    }

    proptest! {
        #[test]
        fn rank_auc_matches_pairwise(pairs in prop::collection::vec((0u8..20, 0u32..2), 1..200)) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 7.0).collect();
            let labels: Vec<u32> = pairs.iter().map(|p| p.1).collect();
            let fast = rank_auc(&scores, &labels).unwrap();
            let slow = brute_auc(&scores, &labels);
            match (fast, slow) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn auc_is_rank_invariant(pairs in prop::collection::vec((-50.0f64..50.0, 0u32..2), 2..100)) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<u32> = pairs.iter().map(|p| p.1).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (s / 10.0).exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(rank_auc(&scores, &labels).unwrap(), rank_auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn class_weights_formula(n_pos in 1usize..60, n_neg in 1usize..60) {
            let mut labels = vec![1u32; n_pos];
            labels.extend(vec![0u32; n_neg]);
            let w = class_weights(&labels).unwrap();
            let n = (n_pos + n_neg) as f64;
            prop_assert!((w[0] - n / (2.0 * n_neg as f64)).abs() < 1e-9);
            prop_assert!((w[1] - n / (2.0 * n_pos as f64)).abs() < 1e-9);
        }

        #[test]
        fn cv_roles_never_share_patients(per_patient in 1usize..4, seed in any::<u64>()) {
            let (x, y) = clusters(48, 2, 2.0, seed);
            let m = manifest_from_labels(&y, per_patient);
            let r = cross_validate(&x, &m, 3, &ProbeConfig { folds: 3, ..Default::default() }, seed).unwrap();
            prop_assert_eq!(r.folds.iter().map(|f| f.n_test).sum::<usize>(), 48);
            let (mean, _) = aggregate(&r.folds);
            prop_assert_eq!(mean, r.mean);
        }
    }
}
