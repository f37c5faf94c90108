//! Subcommand implementations for the `chestssl` binary.
//!
//! Each command takes a validated [`RunConfig`] and writes its artifacts under the configured
//! output directory. Errors carry the process exit code: 1 for invalid input, 2 for failures
//! while running.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chestssl::checkpoint::Checkpoint;
use chestssl::config::RunConfig;
use chestssl::data::{grouped_stratified_split, load_image, DatasetManifest, SampleRecord, Split};
use chestssl::evaluate::{
    checkpoint_id, comparison_table, evaluate_checkpoint, extract_dataset_features, fit_linear_probe, fraction_study,
    read_reports_json, report_csv, write_reports, Downstream, EvaluationReport, FittedProbe,
};
use chestssl::explain::{embedding_plot, grad_cam, write_attention, AttentionMap};
use chestssl::ndarray::Axis;
use chestssl::pretrain::{derive_seed, pretrain_manifest, ImageSource, ManifestImages, PretrainOutcome};
use chestssl::synthetic::{generate, write_dataset, SyntheticConfig};
use chestssl::{tensor_io, Error};
use serde_json::json;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const DIGEST_FILE: &str = "config.digest";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_validation() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

/// Errors raised while checking inputs, before any work starts, all count as validation errors.
fn up_front<T>(r: chestssl::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::validation(e.to_string()))
}

pub type CliResult<T> = Result<T, CliError>;

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    up_front(RunConfig::load(path))
}

fn check_images_exist(manifest: &DatasetManifest) -> CliResult<()> {
    match manifest.records.iter().find(|r| !r.image_path.is_file()) {
        Some(r) => Err(CliError::validation(format!(
            "{}: image {} does not exist",
            manifest.name,
            r.image_path.display()
        ))),
        None => Ok(()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| {
            CliError::from(Error::Io {
                path: parent.into(),
                source: e,
            })
        })?;
    }
    fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.into(),
            source: e,
        }
        .into()
    })
}

/// Writes the resolved config and its digest into `dir`.
fn record_config(config: &RunConfig, dir: &Path) -> CliResult<String> {
    let digest = config.digest()?;
    write_file(&dir.join(RESOLVED_CONFIG), config.to_toml()?)?;
    write_file(&dir.join(DIGEST_FILE), format!("{digest}\n"))?;
    Ok(digest)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    up_front(Checkpoint::load(path))
}

fn digest_warning(config: &RunConfig, ck: &Checkpoint) -> CliResult<Option<String>> {
    let digest = config.digest()?;
    Ok((ck.config_digest != digest).then(|| {
        format!(
            "checkpoint was trained with config digest {} but evaluated under {digest}",
            ck.config_digest
        )
    }))
}

pub fn cmd_pretrain(config: &RunConfig, resume: Option<&Path>) -> CliResult<PretrainOutcome> {
    let manifest = up_front(config.pretext_manifest())?;
    check_images_exist(&manifest)?;
    let setup = config.pretrain_setup()?;
    let resume = resume.map(load_checkpoint).transpose()?;
    record_config(config, &config.output_dir)?;
    eprintln!(
        "pretraining {} on {} images for {} epochs",
        config.backbone.architecture,
        manifest.len(),
        config.train.epochs
    );
    let outcome = pretrain_manifest(&manifest, &setup, &config.output_dir, resume)?;
    if let Some((e, l)) = outcome.state.loss_history.last() {
        eprintln!("epoch {e}: mean loss {l:.6}");
    }
    Ok(outcome)
}

fn downstream_sets(config: &RunConfig) -> CliResult<Vec<DatasetManifest>> {
    let sets = up_front(config.downstream_manifests())?;
    if sets.is_empty() {
        return Err(CliError::validation(
            "no downstream datasets configured (data.downstream)",
        ));
    }
    for m in &sets {
        check_images_exist(m)?;
        up_front(m.labels())?;
    }
    Ok(sets)
}

/// Writes `features/<dataset>.bin` (tensor blob, rows aligned with the manifest) and
/// `features/<dataset>.json` for every downstream dataset.
pub fn cmd_extract(config: &RunConfig, checkpoint: &Path) -> CliResult<Vec<PathBuf>> {
    let sets = downstream_sets(config)?;
    let ck = load_checkpoint(checkpoint)?;
    let digest = record_config(config, &config.output_dir)?;
    let dir = config.output_dir.join("features");
    let mut written = Vec::new();
    for m in &sets {
        let features = extract_dataset_features(
            &ck.state.params,
            &ManifestImages { manifest: m },
            config.feature_tap,
            64,
        )?;
        let path = dir.join(format!("{}.bin", m.name));
        write_file(&path, [])?;
        tensor_io::write_features(&path, &features)?;
        let meta = json!({
            "dataset": m.name,
            "rows": features.nrows(),
            "cols": features.ncols(),
            "feature_tap": config.feature_tap.to_string(),
            "checkpoint": checkpoint.display().to_string(),
            "checkpoint_config_digest": ck.config_digest,
            "config_digest": digest,
        });
        write_file(
            &path.with_extension("json"),
            serde_json::to_string_pretty(&meta).expect("json"),
        )?;
        written.push(path);
    }
    Ok(written)
}

fn write_report_set(reports: &[EvaluationReport], dir: &Path, stem: &str) -> CliResult<()> {
    write_reports(reports, dir, stem)?;
    write_file(&dir.join(format!("{stem}_table.md")), comparison_table(reports))?;
    Ok(())
}

/// Cross-validated probe evaluation of a checkpoint on every downstream dataset, or with
/// `fractions`, a pretraining run per configured pretext fraction followed by evaluation.
///
/// Reports land in `reports/evaluation.*` or `reports/fractions.*`.
pub fn cmd_evaluate(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    fractions: bool,
) -> CliResult<Vec<EvaluationReport>> {
    let sets = downstream_sets(config)?;
    let sources: Vec<ManifestImages> = sets.iter().map(|manifest| ManifestImages { manifest }).collect();
    let downstream: Vec<Downstream> = sets
        .iter()
        .zip(&sources)
        .map(|(manifest, images)| Downstream {
            manifest,
            images: images as &dyn ImageSource,
        })
        .collect();
    let eval = config.eval_setup()?;
    let reports_dir = config.output_dir.join("reports");
    if fractions {
        let pretext = up_front(config.pretext_manifest())?;
        check_images_exist(&pretext)?;
        record_config(config, &config.output_dir)?;
        let setup = config.pretrain_setup()?;
        let reports = fraction_study(
            &ManifestImages { manifest: &pretext },
            &config.data.fractions,
            &setup,
            &downstream,
            &eval,
            &config.output_dir.join("fractions"),
        )?;
        write_report_set(&reports, &reports_dir, "fractions")?;
        return Ok(reports);
    }
    let path = checkpoint.ok_or_else(|| CliError::validation("evaluate needs --checkpoint (or --fractions)"))?;
    let ck = load_checkpoint(path)?;
    let warning = digest_warning(config, &ck)?;
    record_config(config, &config.output_dir)?;
    let id = checkpoint_id(&ck.config_digest, ck.state.epoch);
    let mut reports = evaluate_checkpoint(&ck.state.params, &id, 1.0, &downstream, &eval)?;
    if let Some(w) = warning {
        eprintln!("warning: {w}");
        for r in &mut reports {
            r.warnings.push(w.clone());
        }
    }
    write_report_set(&reports, &reports_dir, "evaluation")?;
    Ok(reports)
}

/// Probe used for attention maps: fitted on a patient-grouped 7:1 train/validation split of a
/// labeled dataset.
pub fn explain_probe(config: &RunConfig, ck: &Checkpoint, manifest: &DatasetManifest) -> CliResult<FittedProbe> {
    let features = extract_dataset_features(&ck.state.params, &ManifestImages { manifest }, config.feature_tap, 64)?;
    let labels = up_front(manifest.labels())?;
    let all: Vec<usize> = (0..manifest.len()).collect();
    let parts = grouped_stratified_split(manifest, &all, &[7.0 / 8.0, 1.0 / 8.0], derive_seed(config.seed, &[20]))?;
    let pick = |idx: &[usize]| {
        (
            features.select(Axis(0), idx),
            idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        )
    };
    let (tx, ty) = pick(&parts[0]);
    let (vx, vy) = pick(&parts[1]);
    Ok(fit_linear_probe(&tx, &ty, &vx, &vy, &config.probe)?)
}

#[derive(Debug, Default)]
pub struct ExplainOutcome {
    pub heatmaps: Vec<PathBuf>,
    pub overlays: Vec<PathBuf>,
    pub maps: Vec<AttentionMap>,
    pub embedding: Option<(PathBuf, PathBuf)>,
}

/// Grad-CAM heatmaps for `images` (falling back to `explain.images` in the config) and, with
/// `tsne`, a t-SNE plot of the first downstream dataset's features. Output goes to `explain/`.
pub fn cmd_explain(config: &RunConfig, checkpoint: &Path, images: &[PathBuf], tsne: bool) -> CliResult<ExplainOutcome> {
    let images: Vec<PathBuf> = if images.is_empty() {
        config.explain.images.clone()
    } else {
        images.to_vec()
    };
    if images.is_empty() && !tsne {
        eprintln!("no images to explain and --tsne not given; nothing to do");
        return Ok(ExplainOutcome::default());
    }
    if let Some(missing) = images.iter().find(|p| !p.is_file()) {
        return Err(CliError::validation(format!(
            "image {} does not exist",
            missing.display()
        )));
    }
    let sets = downstream_sets(config)?;
    let ck = load_checkpoint(checkpoint)?;
    let warning = digest_warning(config, &ck)?;
    let digest = record_config(config, &config.output_dir)?;
    let dir = config.output_dir.join("explain");
    let manifest = &sets[0];
    let mut outcome = ExplainOutcome::default();
    let mut entries = Vec::new();

    if !images.is_empty() {
        let probe = explain_probe(config, &ck, manifest)?;
        let layer = config.target_layer();
        for (i, path) in images.iter().enumerate() {
            let record = SampleRecord {
                image_path: path.clone(),
                label: None,
                patient_id: String::new(),
                split: Split::Unassigned,
            };
            let image = load_image(&record, config.data.image_size)?;
            let id = path.display().to_string();
            let map = grad_cam(&ck.state.params, &probe, &image, &id, &layer, config.feature_tap)?;
            let stem = format!(
                "{i:04}_{}",
                path.file_stem().and_then(|s| s.to_str()).unwrap_or("image")
            );
            let (csv, png) = write_attention(&map, &image, &dir.join("heatmaps"), &stem)?;
            entries.push(json!({
                "source": id,
                "heatmap_csv": csv.file_name().map(|n| n.to_string_lossy().into_owned()),
                "overlay_png": png.file_name().map(|n| n.to_string_lossy().into_owned()),
                "predicted_class": map.predicted_class,
                "logit": map.logit,
            }));
            outcome.heatmaps.push(csv);
            outcome.overlays.push(png);
            outcome.maps.push(map);
        }
    }

    let mut embedding_meta = serde_json::Value::Null;
    if tsne {
        let features =
            extract_dataset_features(&ck.state.params, &ManifestImages { manifest }, config.feature_tap, 64)?;
        let labels: Vec<Option<u32>> = manifest.records.iter().map(|r| r.label).collect();
        let indices: Vec<usize> = (0..manifest.len()).collect();
        let png = dir.join(format!("tsne_{}.png", manifest.name));
        let (_, csv) = embedding_plot(&features, &labels, &indices, &png, &config.explain.tsne, config.seed)?;
        embedding_meta = json!({ "dataset": manifest.name, "plot": png.display().to_string(), "coordinates": csv.display().to_string() });
        outcome.embedding = Some((png, csv));
    }

    let meta = json!({
        "config_digest": digest,
        "checkpoint": checkpoint.display().to_string(),
        "checkpoint_config_digest": ck.config_digest,
        "target_layer": config.target_layer(),
        "feature_tap": config.feature_tap.to_string(),
        "probe_dataset": manifest.name,
        "warnings": warning.into_iter().collect::<Vec<_>>(),
        "heatmaps": entries,
        "embedding": embedding_meta,
    });
    write_file(
        &dir.join("explain.json"),
        serde_json::to_string_pretty(&meta).expect("json"),
    )?;
    Ok(outcome)
}

/// Merges report JSON files into one CSV and comparison table. Returns the table.
pub fn cmd_report(inputs: &[PathBuf], out_dir: &Path) -> CliResult<String> {
    if inputs.is_empty() {
        return Err(CliError::validation("report needs at least one report JSON file"));
    }
    let mut reports = Vec::new();
    for p in inputs {
        reports.extend(up_front(read_reports_json(p))?);
    }
    up_front(report_csv(&reports))?;
    write_report_set(&reports, out_dir, "combined")?;
    Ok(comparison_table(&reports))
}

/// Writes a synthetic labeled dataset (PNG images plus `<name>.csv` manifest) into `dir`.
pub fn cmd_synth(dir: &Path, name: &str, config: &SyntheticConfig) -> CliResult<DatasetManifest> {
    let samples = up_front(generate(config))?;
    Ok(write_dataset(&samples, dir, name)?)
}
