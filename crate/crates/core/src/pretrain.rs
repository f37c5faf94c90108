//! Self-supervised training loop: Adam, per-epoch cosine-annealed learning rate,
//! periodic checkpoints and a loss history.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_pairs, AugmentationConfig, AugmentedBatch};
use crate::checkpoint::{epoch_dir_name, Checkpoint};
use crate::contrastive::{nt_xent_loss_and_grad, ProjectionBatch};
use crate::data::{load_image, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, ModelParameters, ProjectionHeadSpec};
use crate::nn::{Grads, Mode};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;
pub const LOSS_CSV_HEADER: &str = "epoch,mean_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: u32,
    pub weight_decay: f64,
    /// Filled from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
    pub checkpoint_every: u32,
    /// Physical batch size in views. When smaller than `2 * batch_size` the forward pass is
    /// split, but the loss is still taken over the full set of projections.
    pub micro_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            temperature: 0.5,
            learning_rate: 0.0005,
            epochs: 100,
            weight_decay: 1e-6,
            seed: 0,
            checkpoint_every: 1,
            micro_batch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint_every must be >= 1"));
        }
        if self.micro_batch == Some(0) {
            return Err(Error::invalid("micro_batch must be >= 1"));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate for a zero-based epoch index.
pub fn lr_schedule(epoch: u32, total_epochs: u32, base_lr: f64) -> f64 {
    let progress = epoch as f64 / total_epochs.max(1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, ArrayD<f32>>,
    pub v: BTreeMap<String, ArrayD<f32>>,
}

impl AdamState {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        let zeros: BTreeMap<String, ArrayD<f32>> = params
            .store
            .params
            .iter()
            .map(|(k, p)| (k.clone(), ArrayD::zeros(p.raw_dim())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One Adam step with L2 weight decay folded into the gradient. `step` is 1-based.
    fn update(&mut self, params: &mut ModelParameters, grads: &Grads, lr: f64, weight_decay: f64, step: u64) {
        let lr = lr as f32;
        let wd = weight_decay as f32;
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for (name, p) in params.store.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + wd * *p;
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParameters,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimisation steps.
    pub step: u64,
    /// `(1-based epoch, mean batch loss)`.
    pub loss_history: Vec<(u32, f64)>,
}

impl TrainState {
    pub fn new(params: ModelParameters) -> Self {
        Self {
            optimizer: AdamState::zeros_like(&params),
            params,
            epoch: 0,
            step: 0,
            loss_history: Vec::new(),
        }
    }
}

fn to_f64(z: &Array2<f32>) -> Array2<f64> {
    z.mapv(|v| v as f64)
}

/// Forward, NT-Xent loss and gradient for the whole batch. Returns the loss, the parameter
/// gradients and the batch-norm statistic updates.
fn loss_and_grads(
    params: &ModelParameters,
    batch: &AugmentedBatch,
    config: &TrainConfig,
) -> Result<(f64, Grads, Vec<crate::nn::BnUpdate>)> {
    let n = batch.num_views();
    let chunk = config.micro_batch.unwrap_or(n).min(n);
    if chunk >= n {
        let (z, tape) = params.forward(&batch.views, Mode::Train)?;
        let pb = ProjectionBatch::new(to_f64(&z), batch.pair_index.clone(), config.temperature)?;
        let (loss, dz) = nt_xent_loss_and_grad(&pb)?;
        let grads = params.backward(&tape, &dz.mapv(|v| v as f32));
        return Ok((loss, grads, tape.bn_updates));
    }

    // Pass 1: projections for every view, chunk by chunk, without keeping intermediates.
    let mut z_all = Array2::<f32>::zeros((n, params.head.output_size));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let views = batch.views.slice(s![start..end, .., .., ..]).to_owned();
        let (z, _) = params.forward(&views, Mode::Train)?;
        z_all.slice_mut(s![start..end, ..]).assign(&z);
        start = end;
    }
    let pb = ProjectionBatch::new(to_f64(&z_all), batch.pair_index.clone(), config.temperature)?;
    let (loss, dz) = nt_xent_loss_and_grad(&pb)?;
    let dz = dz.mapv(|v| v as f32);

    // Pass 2: recompute each chunk with its tape and backpropagate its slice of the gradient.
    let mut grads = Grads::default();
    let mut updates = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let views = batch.views.slice(s![start..end, .., .., ..]).to_owned();
        let (_, tape) = params.forward(&views, Mode::Train)?;
        grads.merge(params.backward(&tape, &dz.slice(s![start..end, ..]).to_owned()));
        updates.extend(tape.bn_updates);
        start = end;
    }
    Ok((loss, grads, updates))
}

/// One optimisation step on a paired batch. Returns the loss before the update.
pub fn train_step(state: &mut TrainState, batch: &AugmentedBatch, config: &TrainConfig) -> Result<f64> {
    let step = state.step + 1;
    let (loss, grads, updates) = loss_and_grads(&state.params, batch, config)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            what: "loss".into(),
        });
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            step,
            what: "gradient".into(),
        });
    }
    let lr = lr_schedule(state.epoch, config.epochs, config.learning_rate);
    state
        .optimizer
        .update(&mut state.params, &grads, lr, config.weight_decay, step);
    state.params.apply_bn_updates(&updates);
    if !state.params.store.all_finite() {
        return Err(Error::NonFinite {
            step,
            what: "parameters".into(),
        });
    }
    state.step = step;
    Ok(loss)
}

/// Random-access image provider for the training loop.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<Array3<f32>>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images decoded from a manifest at its configured size.
pub struct ManifestImages<'a> {
    pub manifest: &'a DatasetManifest,
}

impl ImageSource for ManifestImages<'_> {
    fn len(&self) -> usize {
        self.manifest.len()
    }
    fn load(&self, index: usize) -> Result<Array3<f32>> {
        load_image(&self.manifest.records[index], self.manifest.image_size)
    }
}

impl ImageSource for Vec<Array3<f32>> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn load(&self, index: usize) -> Result<Array3<f32>> {
        Ok(self[index].clone())
    }
}

/// Image source restricted to a subset of another source's indices.
pub struct Subset<'a, S: ImageSource + ?Sized> {
    pub inner: &'a S,
    pub indices: Vec<usize>,
}

impl<S: ImageSource + ?Sized> ImageSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }
    fn load(&self, index: usize) -> Result<Array3<f32>> {
        self.inner.load(self.indices[index])
    }
}

pub fn load_batch(source: &dyn ImageSource, indices: &[usize]) -> Result<Vec<Array3<f32>>> {
    indices.par_iter().map(|&i| source.load(i)).collect()
}

/// Stacks `(3, h, w)` images into an `(n, 3, h, w)` tensor.
pub fn stack_images(images: &[Array3<f32>]) -> Result<Array4<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let (c, h, w) = first.dim();
    let mut out = Array4::<f32>::zeros((images.len(), c, h, w));
    for (i, im) in images.iter().enumerate() {
        if im.dim() != (c, h, w) {
            return Err(Error::Shape(format!("image {i} has shape {:?}", im.dim())));
        }
        out.index_axis_mut(Axis(0), i).assign(im);
    }
    Ok(out)
}

/// Deterministic seed derivation (SplitMix64 over the parts).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED69));
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Everything that defines a pretraining run apart from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSetup {
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub backbone: BackboneSpec,
    pub head: ProjectionHeadSpec,
    /// Stable digest of the run configuration, recorded in every checkpoint.
    pub config_digest: String,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub checkpoints: Vec<PathBuf>,
    pub loss_csv: PathBuf,
}

pub fn loss_history_csv(history: &[(u32, f64)]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for (e, l) in history {
        out.push_str(&format!("{e},{l}\n"));
    }
    out
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Epochs after which a checkpoint is written.
pub fn checkpoint_epochs(config: &TrainConfig) -> Vec<u32> {
    (1..=config.epochs)
        .filter(|e| e % config.checkpoint_every == 0 || *e == config.epochs)
        .collect()
}

/// Runs (or resumes) pretraining on `source`, writing `checkpoints/epoch_NNNN/` and `loss.csv`
/// under `out_dir`.
pub fn pretrain(
    source: &dyn ImageSource,
    setup: &PretrainSetup,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<PretrainOutcome> {
    let config = &setup.train;
    config.validate()?;
    setup.augment.validate()?;
    if source.len() < 2 {
        return Err(Error::invalid("pretraining needs at least two images"));
    }
    let ckpt_root = out_dir.join("checkpoints");
    ensure_writable(&ckpt_root)?;

    let mut state = match resume {
        Some(ck) => {
            if ck.state.params.backbone != setup.backbone || ck.state.params.head != setup.head {
                return Err(Error::invalid(
                    "checkpoint architecture does not match the configuration",
                ));
            }
            let expected: Vec<u32> = (1..=ck.state.epoch).collect();
            let got: Vec<u32> = ck.state.loss_history.iter().map(|(e, _)| *e).collect();
            if got != expected {
                return Err(Error::format("checkpoint", "loss history is not contiguous"));
            }
            ck.state
        }
        None => TrainState::new(ModelParameters::init(setup.backbone, setup.head, config.seed)?),
    };

    let loss_csv = out_dir.join("loss.csv");
    let mut checkpoints = Vec::new();
    let n = source.len();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[1, epoch as u64],
        )));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let images = load_batch(source, chunk)?;
            let aug_seed = derive_seed(config.seed, &[2, epoch as u64, bi as u64]);
            let batch = make_pairs(&images, &setup.augment, aug_seed)?.with_source_indices(chunk)?;
            total += train_step(&mut state, &batch, config)?;
            batches += 1;
        }
        state.epoch += 1;
        state.loss_history.push((state.epoch, total / batches.max(1) as f64));
        fs::write(&loss_csv, loss_history_csv(&state.loss_history)).map_err(|e| Error::io(&loss_csv, e))?;
        if state.epoch % config.checkpoint_every == 0 || state.epoch == config.epochs {
            let dir = ckpt_root.join(epoch_dir_name(state.epoch));
            Checkpoint {
                state: state.clone(),
                config_digest: setup.config_digest.clone(),
            }
            .save(&dir)?;
            checkpoints.push(dir);
        }
    }
    Ok(PretrainOutcome {
        state,
        checkpoints,
        loss_csv,
    })
}

/// Convenience wrapper reading images from a manifest (labels are ignored).
pub fn pretrain_manifest(
    manifest: &DatasetManifest,
    setup: &PretrainSetup,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<PretrainOutcome> {
    pretrain(&ManifestImages { manifest }, setup, out_dir, resume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, 100, 0.0005), 0.0005);
        assert!((lr_schedule(50, 100, 0.0005) - 0.00025).abs() < 1e-18);
        // 0.0005 * (1 + cos(pi / 4)) / 2
        let expected = 0.0005 * 0.5 * (1.0 + std::f64::consts::FRAC_1_SQRT_2);
        assert!((lr_schedule(25, 100, 0.0005) - expected).abs() < 1e-15);
        assert!((lr_schedule(25, 100, 0.0005) - 0.0004268).abs() < 1e-7);
        for e in 0..100 {
            let lr = lr_schedule(e, 100, 0.0005);
            assert!(lr > 0.0 && lr <= 0.0005);
        }
    }

    #[test]
    fn checkpoint_schedule_arithmetic() {
        let cfg = TrainConfig {
            epochs: 100,
            checkpoint_every: 25,
            ..Default::default()
        };
        assert_eq!(checkpoint_epochs(&cfg), vec![25, 50, 75, 100]);
        let cfg = TrainConfig {
            epochs: 10,
            checkpoint_every: 4,
            ..Default::default()
        };
        assert_eq!(checkpoint_epochs(&cfg), vec![4, 8, 10]);
    }

    #[test]
    fn seeds_are_distinct() {
        assert_ne!(derive_seed(1, &[2, 0]), derive_seed(1, &[2, 1]));
        assert_ne!(derive_seed(1, &[1, 0]), derive_seed(2, &[1, 0]));
        assert_eq!(derive_seed(5, &[7]), derive_seed(5, &[7]));
    }

    fn small_setup() -> (PretrainSetup, Vec<Array3<f32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let images = (0..6)
            .map(|_| Array3::from_shape_fn((3, 16, 16), |_| rng.random::<f32>()))
            .collect();
        let setup = PretrainSetup {
            train: TrainConfig {
                batch_size: 3,
                epochs: 2,
                learning_rate: 1e-3,
                ..Default::default()
            },
            augment: AugmentationConfig::default(),
            backbone: BackboneSpec::tiny_cnn(),
            head: ProjectionHeadSpec {
                hidden_size: 16,
                output_size: 8,
            },
            config_digest: "test".into(),
        };
        (setup, images)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (setup, images) = small_setup();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..setup.train.clone()
        };
        let params = ModelParameters::init(setup.backbone, setup.head, 1).unwrap();
        let mut state = TrainState::new(params.clone());
        let batch = make_pairs(&images[..3], &setup.augment, 4).unwrap();
        let loss = train_step(&mut state, &batch, &cfg).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(state.params.store.params, params.store.params);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn micro_batches_match_full_batch_loss_and_gradient() {
        let (setup, images) = small_setup();
        let params = ModelParameters::init(setup.backbone, setup.head, 1).unwrap();
        let batch = make_pairs(&images[..4], &setup.augment, 4).unwrap();
        let full = TrainConfig {
            micro_batch: None,
            ..setup.train.clone()
        };
        // Chunks of 8 views cover the whole batch, so batch-norm statistics are identical.
        let chunked = TrainConfig {
            micro_batch: Some(8),
            ..setup.train.clone()
        };
        let (l1, g1, _) = loss_and_grads(&params, &batch, &full).unwrap();
        let (l2, g2, _) = loss_and_grads(&params, &batch, &chunked).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1.0, g2.0);
        // Smaller chunks use per-chunk batch statistics but still produce a finite loss over all views.
        let small = TrainConfig {
            micro_batch: Some(3),
            ..setup.train.clone()
        };
        let (l3, g3, updates) = loss_and_grads(&params, &batch, &small).unwrap();
        assert!(l3.is_finite() && g3.all_finite());
        assert_eq!(updates.len(), 3 * 5);
    }

    #[test]
    fn pretrain_is_deterministic_and_resumable() {
        let (setup, images) = small_setup();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = pretrain(&images, &setup, a.path(), None).unwrap();
        let rb = pretrain(&images, &setup, b.path(), None).unwrap();
        assert_eq!(fs::read(&ra.loss_csv).unwrap(), fs::read(&rb.loss_csv).unwrap());
        assert_eq!(ra.checkpoints.len(), 2);

        // Resume from epoch 1 and continue to 3 epochs.
        let ck = Checkpoint::load(&ra.checkpoints[0]).unwrap();
        let mut longer = setup.clone();
        longer.train.epochs = 3;
        let c = tempfile::tempdir().unwrap();
        let rc = pretrain(&images, &longer, c.path(), Some(ck)).unwrap();
        let epochs: Vec<u32> = rc.state.loss_history.iter().map(|(e, _)| *e).collect();
        assert_eq!(epochs, vec![1, 2, 3]);
        assert_eq!(rc.state.loss_history[0], ra.state.loss_history[0]);
    }

    #[test]
    fn unwritable_output_aborts_before_training() {
        let (setup, images) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(pretrain(&images, &setup, &file, None), Err(Error::Io { .. })));
    }
}
