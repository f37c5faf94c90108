//! Run configuration file.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"          # relative paths resolve against the config file
//! feature_tap = "projection_output" # or "backbone_pooled"
//!
//! [data]
//! pretext = "data/pretext.csv"
//! downstream = ["data/cell.csv"]
//! image_size = [224, 224]
//! fractions = [0.01, 0.1, 1.0]
//!
//! [train]      # batch_size, temperature, learning_rate, epochs, weight_decay,
//!              # checkpoint_every, micro_batch
//! [augment]    # crop_scale_range, flip_probability, rotation_degrees, blur_kernel,
//!              # blur_sigma_range, jitter_strength
//! [backbone]   # architecture = "wide_resnet50" | "tiny_cnn"
//! [head]       # hidden_size, output_size
//! [probe]      # c_grid, class_weighting, selection_metric, standardize, folds
//! [explain]    # target_layer, images, [explain.tsne]
//! ```
//!
//! Every section is optional except `[data]`; omitted keys take their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::data::{load_manifest, DatasetManifest};
use crate::error::{Error, Result};
use crate::evaluate::{EvalSetup, ProbeConfig};
use crate::explain::TsneConfig;
use crate::model::{BackboneSpec, FeatureTap, ProjectionHeadSpec};
use crate::pretrain::{PretrainSetup, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub pretext: PathBuf,
    #[serde(default)]
    pub downstream: Vec<PathBuf>,
    #[serde(default = "default_image_size")]
    pub image_size: (usize, usize),
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
}

fn default_image_size() -> (usize, usize) {
    crate::data::DEFAULT_IMAGE_SIZE
}

fn default_fractions() -> Vec<f64> {
    vec![0.01, 0.1, 1.0]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Backbone stage for Grad-CAM; the last stage when absent.
    pub target_layer: Option<String>,
    /// Images to explain, as paths to image files.
    pub images: Vec<PathBuf>,
    pub tsne: TsneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub feature_tap: FeatureTap,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentationConfig,
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub head: ProjectionHeadSpec,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses TOML text. Relative paths are kept as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads, parses and validates a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.output_dir = resolve(base, &self.output_dir);
        self.data.pretext = resolve(base, &self.data.pretext);
        for p in &mut self.data.downstream {
            *p = resolve(base, p);
        }
        for p in &mut self.explain.images {
            *p = resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.train.validate().map_err(wrap)?;
        self.augment.validate().map_err(wrap)?;
        self.head.validate().map_err(wrap)?;
        self.probe.validate().map_err(wrap)?;
        self.explain.tsne.validate().map_err(wrap)?;
        let (h, w) = self.data.image_size;
        let min = self.backbone.downsampling();
        if h < min || w < min {
            return Err(Error::Config(format!(
                "image_size {h}x{w} is smaller than the backbone's downsampling factor {min}"
            )));
        }
        if let Some(f) = self.data.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("fractions must lie in (0, 1], got {f}")));
        }
        if let Some(layer) = &self.explain.target_layer {
            if !self.backbone.stage_names().contains(layer) {
                return Err(Error::Config(format!(
                    "explain.target_layer `{layer}` is not one of {}",
                    self.backbone.stage_names().join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Canonical TOML rendering of the configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical rendering, excluding `output_dir` (which never affects results).
    pub fn digest(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let text = canonical.to_toml()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn target_layer(&self) -> String {
        self.explain
            .target_layer
            .clone()
            .unwrap_or_else(|| self.backbone.last_stage())
    }

    pub fn pretrain_setup(&self) -> Result<PretrainSetup> {
        Ok(PretrainSetup {
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
            augment: self.augment.clone(),
            backbone: self.backbone,
            head: self.head,
            config_digest: self.digest()?,
        })
    }

    pub fn eval_setup(&self) -> Result<EvalSetup> {
        Ok(EvalSetup {
            probe: self.probe.clone(),
            tap: self.feature_tap,
            seed: self.seed,
            config_digest: self.digest()?,
        })
    }

    fn with_size(&self, mut m: DatasetManifest) -> DatasetManifest {
        m.image_size = self.data.image_size;
        m
    }

    pub fn pretext_manifest(&self) -> Result<DatasetManifest> {
        Ok(self.with_size(load_manifest(&self.data.pretext)?))
    }

    pub fn downstream_manifests(&self) -> Result<Vec<DatasetManifest>> {
        self.data
            .downstream
            .iter()
            .map(|p| Ok(self.with_size(load_manifest(p)?)))
            .collect()
    }
}
