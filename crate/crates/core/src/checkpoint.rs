//! On-disk checkpoints.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! epoch_0025/
//!   meta.txt            key = value metadata, see below
//!   params/<name>.bin   one tensor blob per trainable parameter
//!   buffers/<name>.bin  batch-norm running statistics
//!   adam_m/<name>.bin   optimizer first moments
//!   adam_v/<name>.bin   optimizer second moments
//! ```
//!
//! `meta.txt` holds one `key = value` pair per line. Recognised keys are `format`, `epoch`,
//! `step`, `architecture`, `hidden_size`, `output_size`, `config_digest`, and repeated
//! `loss = <epoch> <mean loss>` lines. Blank lines and lines starting with `#` are ignored.
//! Tensor blobs use the format described in [`crate::tensor_io`]. Values are stored bit-exactly,
//! so a loaded model reproduces the saved model's features exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::{Architecture, BackboneSpec, ModelParameters, ProjectionHeadSpec};
use crate::nn::ParamStore;
use crate::pretrain::{AdamState, TrainState};
use crate::tensor_io;

pub const FORMAT_TAG: &str = "chestssl-checkpoint/1";
const META_FILE: &str = "meta.txt";

/// Model parameters plus the training metadata needed to resume or audit a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub step: u64,
    pub architecture: Architecture,
    pub hidden_size: usize,
    pub output_size: usize,
    pub config_digest: String,
    pub loss_history: Vec<(u32, f64)>,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "format = {FORMAT_TAG}\nepoch = {}\nstep = {}\narchitecture = {}\nhidden_size = {}\noutput_size = {}\nconfig_digest = {}\n",
            self.epoch, self.step, self.architecture, self.hidden_size, self.output_size, self.config_digest
        );
        for (e, l) in &self.loss_history {
            out.push_str(&format!("loss = {e} {l}\n"));
        }
        out
    }
}

pub fn parse_metadata(text: &str) -> Result<CheckpointMeta> {
    let bad = |m: String| Error::format("checkpoint metadata", m);
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut loss_history = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected `key = value`", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "loss" {
            let mut parts = value.split_whitespace();
            let (Some(e), Some(l), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!("line {}: loss needs `<epoch> <value>`", i + 1)));
            };
            let e: u32 = e.parse().map_err(|_| bad(format!("line {}: bad epoch `{e}`", i + 1)))?;
            let l: f64 = l.parse().map_err(|_| bad(format!("line {}: bad loss `{l}`", i + 1)))?;
            loss_history.push((e, l));
        } else if fields.insert(key, value).is_some() {
            return Err(bad(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing key `{k}`")));
    if get("format")? != FORMAT_TAG {
        return Err(bad(format!("unsupported format `{}`", get("format")?)));
    }
    let num = |k: &str| -> Result<u64> {
        let v = get(k)?;
        v.parse().map_err(|_| bad(format!("`{k}` is not an integer: `{v}`")))
    };
    let epoch = u32::try_from(num("epoch")?).map_err(|_| bad("epoch out of range".into()))?;
    Ok(CheckpointMeta {
        epoch,
        step: num("step")?,
        architecture: get("architecture")?.parse()?,
        hidden_size: num("hidden_size")? as usize,
        output_size: num("output_size")? as usize,
        config_digest: get("config_digest")?.to_string(),
        loss_history,
    })
}

fn write_tensor_dir(dir: &Path, tensors: &BTreeMap<String, ArrayD<f32>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in tensors {
        tensor_io::write_f32(&dir.join(format!("{name}.bin")), t)?;
    }
    Ok(())
}

fn read_tensor_dir(dir: &Path) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let Some(name) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".bin"))
        else {
            continue;
        };
        out.insert(name.to_string(), tensor_io::read(&path)?.into_f32());
    }
    Ok(out)
}

pub fn epoch_dir_name(epoch: u32) -> String {
    format!("epoch_{epoch:04}")
}

impl Checkpoint {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.state.epoch,
            step: self.state.step,
            architecture: self.state.params.backbone.architecture,
            hidden_size: self.state.params.head.hidden_size,
            output_size: self.state.params.head.output_size,
            config_digest: self.config_digest.clone(),
            loss_history: self.state.loss_history.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let store = &self.state.params.store;
        write_tensor_dir(&dir.join("params"), &store.params)?;
        write_tensor_dir(&dir.join("buffers"), &store.buffers)?;
        write_tensor_dir(&dir.join("adam_m"), &self.state.optimizer.m)?;
        write_tensor_dir(&dir.join("adam_v"), &self.state.optimizer.v)?;
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, self.meta().to_text()).map_err(|e| Error::io(meta_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = parse_metadata(&text)?;
        let params = ModelParameters {
            backbone: BackboneSpec::new(meta.architecture),
            head: ProjectionHeadSpec {
                hidden_size: meta.hidden_size,
                output_size: meta.output_size,
            },
            store: ParamStore {
                params: read_tensor_dir(&dir.join("params"))?,
                buffers: read_tensor_dir(&dir.join("buffers"))?,
            },
        };
        params.validate()?;
        let optimizer = AdamState {
            m: read_tensor_dir(&dir.join("adam_m"))?,
            v: read_tensor_dir(&dir.join("adam_v"))?,
        };
        for (name, p) in &params.store.params {
            for (kind, moments) in [("adam_m", &optimizer.m), ("adam_v", &optimizer.v)] {
                if let Some(t) = moments.get(name) {
                    if t.shape() != p.shape() {
                        return Err(Error::format(
                            "checkpoint",
                            format!("{kind}/{name} has the wrong shape"),
                        ));
                    }
                }
            }
        }
        Ok(Checkpoint {
            state: TrainState {
                params,
                optimizer,
                epoch: meta.epoch,
                step: meta.step,
                loss_history: meta.loss_history,
            },
            config_digest: meta.config_digest,
        })
    }
}

/// Checkpoint directories under `root`, sorted by epoch.
pub fn list_checkpoints(root: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if let Some(epoch) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.parse::<u32>().ok())
        {
            if path.join(META_FILE).is_file() {
                out.push((epoch, path));
            }
        }
    }
    out.sort();
    Ok(out)
}
