//! Backbone encoder and projection head.
//!
//! Two backbones are provided: a Wide-ResNet-50-2 (bottleneck width doubled, 2048 output
//! channels) and a four-block strided CNN for small images. The projection head is fixed:
//! global average pooling, dense with bias, batch-norm, ReLU, dense without bias.

use std::fmt;

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, as_nchw, from_nchw, global_avg_pool, global_avg_pool_backward, max_pool_3x3_s2, max_pool_backward, relu,
    relu_backward, BatchNorm, BnCache, BnUpdate, Conv2d, Dense, Grads, Mode, ParamStore,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    WideResnet50,
    TinyCnn,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::WideResnet50 => "wide_resnet50",
            Architecture::TinyCnn => "tiny_cnn",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide_resnet50" => Ok(Architecture::WideResnet50),
            "tiny_cnn" => Ok(Architecture::TinyCnn),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

const TINY_CHANNELS: [usize; 4] = [16, 32, 64, 64];
const WRN_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const WRN_PLANES: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "BackboneToml", into = "BackboneToml")]
pub struct BackboneSpec {
    pub architecture: Architecture,
    pub feature_channels: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackboneToml {
    architecture: Architecture,
}

impl From<BackboneToml> for BackboneSpec {
    fn from(t: BackboneToml) -> Self {
        BackboneSpec::new(t.architecture)
    }
}

impl From<BackboneSpec> for BackboneToml {
    fn from(s: BackboneSpec) -> Self {
        BackboneToml {
            architecture: s.architecture,
        }
    }
}

impl BackboneSpec {
    pub fn new(architecture: Architecture) -> Self {
        let feature_channels = match architecture {
            Architecture::TinyCnn => TINY_CHANNELS[3],
            Architecture::WideResnet50 => WRN_PLANES[3] * 4,
        };
        Self {
            architecture,
            feature_channels,
        }
    }

    pub fn tiny_cnn() -> Self {
        Self::new(Architecture::TinyCnn)
    }

    pub fn wide_resnet50() -> Self {
        Self::new(Architecture::WideResnet50)
    }

    /// Spatial downsampling between the input and the final feature map.
    pub fn downsampling(&self) -> usize {
        match self.architecture {
            Architecture::TinyCnn => 16,
            Architecture::WideResnet50 => 32,
        }
    }

    /// Names of the convolutional stages usable as Grad-CAM targets, input to output.
    pub fn stage_names(&self) -> Vec<String> {
        match self.architecture {
            Architecture::TinyCnn => (1..=4).map(|i| format!("block{i}")).collect(),
            Architecture::WideResnet50 => std::iter::once("stem".to_string())
                .chain((1..=4).map(|i| format!("layer{i}")))
                .collect(),
        }
    }

    pub fn last_stage(&self) -> String {
        self.stage_names().pop().expect("at least one stage")
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::wide_resnet50()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionHeadSpec {
    pub hidden_size: usize,
    pub output_size: usize,
}

impl Default for ProjectionHeadSpec {
    fn default() -> Self {
        Self {
            hidden_size: 2048,
            output_size: 128,
        }
    }
}

impl ProjectionHeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.output_size == 0 {
            return Err(Error::invalid("projection head sizes must be positive"));
        }
        Ok(())
    }
}

/// Which representation is handed to downstream classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    /// Global average of the backbone's final feature map.
    BackbonePooled,
    /// Output of the projection head.
    #[default]
    ProjectionOutput,
}

impl fmt::Display for FeatureTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureTap::BackbonePooled => "backbone_pooled",
            FeatureTap::ProjectionOutput => "projection_output",
        })
    }
}

// ---------------------------------------------------------------------------
// Blocks

#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

#[derive(Debug, Clone)]
enum Block {
    ConvBnRelu(ConvBnRelu),
    Stem(Stem),
    Bottleneck(Bottleneck),
}

#[derive(Debug, Clone)]
pub(crate) enum BlockCache {
    ConvBnRelu {
        x: Array4<f32>,
        bn: BnCache,
        out: Array4<f32>,
    },
    Stem {
        x: Array4<f32>,
        bn: BnCache,
        act: Array4<f32>,
        argmax: Vec<usize>,
    },
    Bottleneck {
        x: Array4<f32>,
        bn1: BnCache,
        a1: Array4<f32>,
        bn2: BnCache,
        a2: Array4<f32>,
        bn3: BnCache,
        down: Option<BnCache>,
        out: Array4<f32>,
    },
}

impl Block {
    fn forward(
        &self,
        store: &ParamStore,
        x: Array4<f32>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Array4<f32>, BlockCache)> {
        match self {
            Block::ConvBnRelu(b) => {
                let c = b.conv.forward(store, &x)?;
                let (y, bn) = b.bn.forward(store, &c, mode, updates)?;
                let out = relu(y);
                Ok((out.clone(), BlockCache::ConvBnRelu { x, bn, out }))
            }
            Block::Stem(b) => {
                let c = b.conv.forward(store, &x)?;
                let (y, bn) = b.bn.forward(store, &c, mode, updates)?;
                let act = relu(y);
                let (out, argmax) = max_pool_3x3_s2(&act);
                Ok((out, BlockCache::Stem { x, bn, act, argmax }))
            }
            Block::Bottleneck(b) => {
                let (y1, bn1) = b.bn1.forward(store, &b.conv1.forward(store, &x)?, mode, updates)?;
                let a1 = relu(y1);
                let (y2, bn2) = b.bn2.forward(store, &b.conv2.forward(store, &a1)?, mode, updates)?;
                let a2 = relu(y2);
                let (y3, bn3) = b.bn3.forward(store, &b.conv3.forward(store, &a2)?, mode, updates)?;
                let (shortcut, down) = match &b.downsample {
                    Some((conv, bn)) => {
                        let (s, cache) = bn.forward(store, &conv.forward(store, &x)?, mode, updates)?;
                        (s, Some(cache))
                    }
                    None => (x.clone(), None),
                };
                let out = relu(y3 + shortcut);
                Ok((
                    out.clone(),
                    BlockCache::Bottleneck {
                        x,
                        bn1,
                        a1,
                        bn2,
                        a2,
                        bn3,
                        down,
                        out,
                    },
                ))
            }
        }
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &BlockCache,
        dy: &Array4<f32>,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Array4<f32>> {
        match (self, cache) {
            (Block::ConvBnRelu(b), BlockCache::ConvBnRelu { x, bn, out }) => {
                let d = relu_backward(out, dy);
                let d = b.bn.backward(store, bn, &d, grads);
                b.conv.backward(store, x, &d, grads, need_dx)
            }
            (Block::Stem(b), BlockCache::Stem { x, bn, act, argmax }) => {
                let d = max_pool_backward(act.dim(), argmax, dy);
                let d = relu_backward(act, &d);
                let d = b.bn.backward(store, bn, &d, grads);
                b.conv.backward(store, x, &d, grads, need_dx)
            }
            (
                Block::Bottleneck(b),
                BlockCache::Bottleneck {
                    x,
                    bn1,
                    a1,
                    bn2,
                    a2,
                    bn3,
                    down,
                    out,
                },
            ) => {
                let d_sum = relu_backward(out, dy);
                let d = b.bn3.backward(store, bn3, &d_sum, grads);
                let d = b.conv3.backward(store, a2, &d, grads, true).expect("requested dx");
                let d = b.bn2.backward(store, bn2, &relu_backward(a2, &d), grads);
                let d = b.conv2.backward(store, a1, &d, grads, true).expect("requested dx");
                let d = b.bn1.backward(store, bn1, &relu_backward(a1, &d), grads);
                let d_main = b.conv1.backward(store, x, &d, grads, need_dx);
                let d_short = match (&b.downsample, down) {
                    (Some((conv, bn)), Some(cache)) => {
                        let d = bn.backward(store, cache, &d_sum, grads);
                        conv.backward(store, x, &d, grads, need_dx)
                    }
                    _ => need_dx.then(|| d_sum.clone()),
                };
                match (d_main, d_short) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                }
            }
            _ => unreachable!("cache does not belong to block"),
        }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    name: String,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
struct Head {
    fc1: Dense,
    bn: BatchNorm,
    fc2: Dense,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    pooled: Array2<f32>,
    bn: BnCache,
    act: Array2<f32>,
    fmap_hw: (usize, usize),
}

#[derive(Debug, Clone)]
struct Network {
    stages: Vec<Stage>,
    head: Head,
}

impl Network {
    fn build(backbone: &BackboneSpec, head: &ProjectionHeadSpec) -> Self {
        let stages = match backbone.architecture {
            Architecture::TinyCnn => {
                let mut in_c = 3;
                TINY_CHANNELS
                    .iter()
                    .enumerate()
                    .map(|(i, &out_c)| {
                        let name = format!("block{}", i + 1);
                        let block = Block::ConvBnRelu(ConvBnRelu {
                            conv: Conv2d::new(format!("{name}.conv"), in_c, out_c, 3, 2, 1),
                            bn: BatchNorm::new(format!("{name}.bn"), out_c),
                        });
                        in_c = out_c;
                        Stage {
                            name,
                            blocks: vec![block],
                        }
                    })
                    .collect()
            }
            Architecture::WideResnet50 => {
                let mut stages = vec![Stage {
                    name: "stem".into(),
                    blocks: vec![Block::Stem(Stem {
                        conv: Conv2d::new("stem.conv", 3, 64, 7, 2, 3),
                        bn: BatchNorm::new("stem.bn", 64),
                    })],
                }];
                let mut in_c = 64;
                for (li, (&n_blocks, &planes)) in WRN_BLOCKS.iter().zip(WRN_PLANES.iter()).enumerate() {
                    let width = planes * 2;
                    let out_c = planes * 4;
                    let stage_name = format!("layer{}", li + 1);
                    let blocks = (0..n_blocks)
                        .map(|bi| {
                            let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                            let p = format!("{stage_name}.{bi}");
                            let downsample = (bi == 0).then(|| {
                                (
                                    Conv2d::new(format!("{p}.downsample.conv"), in_c, out_c, 1, stride, 0),
                                    BatchNorm::new(format!("{p}.downsample.bn"), out_c),
                                )
                            });
                            let block = Block::Bottleneck(Bottleneck {
                                conv1: Conv2d::new(format!("{p}.conv1"), in_c, width, 1, 1, 0),
                                bn1: BatchNorm::new(format!("{p}.bn1"), width),
                                conv2: Conv2d::new(format!("{p}.conv2"), width, width, 3, stride, 1),
                                bn2: BatchNorm::new(format!("{p}.bn2"), width),
                                conv3: Conv2d::new(format!("{p}.conv3"), width, out_c, 1, 1, 0),
                                bn3: BatchNorm::new(format!("{p}.bn3"), out_c),
                                downsample,
                            });
                            in_c = out_c;
                            block
                        })
                        .collect();
                    stages.push(Stage {
                        name: stage_name,
                        blocks,
                    });
                }
                stages
            }
        };
        let head = Head {
            fc1: Dense::new("head.fc1", backbone.feature_channels, head.hidden_size, true),
            bn: BatchNorm::new("head.bn", head.hidden_size),
            fc2: Dense::new("head.fc2", head.hidden_size, head.output_size, false),
        };
        Network { stages, head }
    }

    fn convs_and_bns(&self) -> (Vec<&Conv2d>, Vec<&BatchNorm>) {
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                match block {
                    Block::ConvBnRelu(b) => {
                        convs.push(&b.conv);
                        bns.push(&b.bn);
                    }
                    Block::Stem(b) => {
                        convs.push(&b.conv);
                        bns.push(&b.bn);
                    }
                    Block::Bottleneck(b) => {
                        convs.extend([&b.conv1, &b.conv2, &b.conv3]);
                        bns.extend([&b.bn1, &b.bn2, &b.bn3]);
                        if let Some((c, n)) = &b.downsample {
                            convs.push(c);
                            bns.push(n);
                        }
                    }
                }
            }
        }
        bns.push(&self.head.bn);
        (convs, bns)
    }
}

/// Every weight of the backbone and projection head, plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub backbone: BackboneSpec,
    pub head: ProjectionHeadSpec,
    pub store: ParamStore,
}

/// Intermediates of a forward pass needed for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    stages: Vec<Vec<BlockCache>>,
    head: HeadCache,
    pub bn_updates: Vec<BnUpdate>,
}

impl ModelParameters {
    /// He-normal initialisation of convolution and dense weights, unit batch-norm scales.
    pub fn init(backbone: BackboneSpec, head: ProjectionHeadSpec, seed: u64) -> Result<Self> {
        head.validate()?;
        let net = Network::build(&backbone, &head);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (convs, bns) = net.convs_and_bns();
        for conv in convs {
            let fan_in = conv.in_channels * conv.kernel * conv.kernel;
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
            let shape = conv.weight_shape();
            let w = ArrayD::from_shape_simple_fn(IxDyn(&shape), || normal.sample(&mut rng));
            store.params.insert(conv.weight_name(), w);
        }
        for dense in [&net.head.fc1, &net.head.fc2] {
            let normal = Normal::new(0.0f32, (2.0 / dense.in_features as f32).sqrt()).expect("valid std");
            let w = ArrayD::from_shape_simple_fn(IxDyn(&[dense.out_features, dense.in_features]), || {
                normal.sample(&mut rng)
            });
            store.params.insert(dense.weight_name(), w);
            if dense.bias {
                store
                    .params
                    .insert(dense.bias_name(), Array1::<f32>::zeros(dense.out_features).into_dyn());
            }
        }
        for bn in bns {
            store
                .params
                .insert(bn.gamma_name(), Array1::<f32>::ones(bn.channels).into_dyn());
            store
                .params
                .insert(bn.beta_name(), Array1::<f32>::zeros(bn.channels).into_dyn());
            store
                .buffers
                .insert(bn.mean_name(), Array1::<f32>::zeros(bn.channels).into_dyn());
            store
                .buffers
                .insert(bn.var_name(), Array1::<f32>::ones(bn.channels).into_dyn());
        }
        Ok(Self { backbone, head, store })
    }

    /// Checks that the store holds exactly the tensors this architecture needs, with the right shapes.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::init(self.backbone, self.head, 0)?;
        for (kind, want, got) in [
            ("parameter", &reference.store.params, &self.store.params),
            ("buffer", &reference.store.buffers, &self.store.buffers),
        ] {
            for (name, t) in want {
                match got.get(name) {
                    None => return Err(Error::format("checkpoint", format!("missing {kind} `{name}`"))),
                    Some(g) if g.shape() != t.shape() => {
                        return Err(Error::format(
                            "checkpoint",
                            format!("{kind} `{name}` has shape {:?}, expected {:?}", g.shape(), t.shape()),
                        ))
                    }
                    _ => {}
                }
            }
            if let Some(extra) = got.keys().find(|k| !want.contains_key(*k)) {
                return Err(Error::format("checkpoint", format!("unexpected {kind} `{extra}`")));
            }
        }
        if !self.store.all_finite() {
            return Err(Error::format("checkpoint", "non-finite parameter values"));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_trainable()
    }

    fn network(&self) -> Network {
        Network::build(&self.backbone, &self.head)
    }

    fn check_images(&self, images: &Array4<f32>) -> Result<()> {
        let (n, c, h, w) = images.dim();
        if n == 0 || c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "expected (n>=1, 3, h, w) images, got {:?}",
                images.dim()
            )));
        }
        Ok(())
    }

    fn backbone_forward(
        &self,
        net: &Network,
        images: &Array4<f32>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Array4<f32>, Vec<Vec<BlockCache>>, Vec<Array4<f32>>)> {
        self.check_images(images)?;
        let mut x = images.clone();
        let mut caches = Vec::with_capacity(net.stages.len());
        let mut outputs = Vec::with_capacity(net.stages.len());
        for stage in &net.stages {
            let mut stage_caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, cache) = block.forward(&self.store, x, mode, updates)?;
                stage_caches.push(cache);
                x = y;
            }
            caches.push(stage_caches);
            outputs.push(x.clone());
        }
        Ok((x, caches, outputs))
    }

    fn head_forward(
        &self,
        net: &Network,
        fmap: &Array4<f32>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Array2<f32>, HeadCache)> {
        let (_, c, h, w) = fmap.dim();
        if c != net.head.fc1.in_features {
            return Err(Error::Shape(format!(
                "projection head expects {} channels, got {c}",
                net.head.fc1.in_features
            )));
        }
        let pooled = global_avg_pool(fmap);
        let h1 = net.head.fc1.forward(&self.store, &pooled)?;
        let (bn_out, bn) = net.head.bn.forward(&self.store, &as_nchw(h1), mode, updates)?;
        let act = from_nchw(relu(bn_out));
        let z = net.head.fc2.forward(&self.store, &act)?;
        Ok((
            z,
            HeadCache {
                pooled,
                bn,
                act,
                fmap_hw: (h, w),
            },
        ))
    }

    fn head_backward(&self, net: &Network, cache: &HeadCache, dz: &Array2<f32>, grads: &mut Grads) -> Array4<f32> {
        let d_act = net.head.fc2.backward(&self.store, &cache.act, dz, grads);
        let d = relu_backward(&as_nchw(cache.act.clone()), &as_nchw(d_act));
        let d = from_nchw(net.head.bn.backward(&self.store, &cache.bn, &d, grads));
        let d_pooled = net.head.fc1.backward(&self.store, &cache.pooled, &d, grads);
        global_avg_pool_backward(&d_pooled, cache.fmap_hw.0, cache.fmap_hw.1)
    }

    /// Backbone feature maps in inference mode.
    pub fn encode(&self, images: &Array4<f32>) -> Result<Array4<f32>> {
        let net = self.network();
        let (fmap, _, _) = self.backbone_forward(&net, images, Mode::Eval, &mut Vec::new())?;
        Ok(fmap)
    }

    /// Projection head output in inference mode.
    pub fn project(&self, feature_maps: &Array4<f32>) -> Result<Array2<f32>> {
        self.project_with_mode(feature_maps, Mode::Eval)
    }

    /// Projection head output; `Mode::Train` normalises with batch statistics (running
    /// statistics are left untouched here).
    pub fn project_with_mode(&self, feature_maps: &Array4<f32>, mode: Mode) -> Result<Array2<f32>> {
        let net = self.network();
        Ok(self.head_forward(&net, feature_maps, mode, &mut Vec::new())?.0)
    }

    pub fn extract_features(&self, images: &Array4<f32>, tap: FeatureTap) -> Result<Array2<f32>> {
        let net = self.network();
        let (fmap, _, _) = self.backbone_forward(&net, images, Mode::Eval, &mut Vec::new())?;
        match tap {
            FeatureTap::BackbonePooled => Ok(global_avg_pool(&fmap)),
            FeatureTap::ProjectionOutput => Ok(self.head_forward(&net, &fmap, Mode::Eval, &mut Vec::new())?.0),
        }
    }

    /// Full forward pass keeping everything needed by [`ModelParameters::backward`].
    pub fn forward(&self, images: &Array4<f32>, mode: Mode) -> Result<(Array2<f32>, ForwardTape)> {
        let net = self.network();
        let mut updates = Vec::new();
        let (fmap, stages, _) = self.backbone_forward(&net, images, mode, &mut updates)?;
        let (z, head) = self.head_forward(&net, &fmap, mode, &mut updates)?;
        Ok((
            z,
            ForwardTape {
                stages,
                head,
                bn_updates: updates,
            },
        ))
    }

    /// Gradients of `sum(dz * z)` with respect to every trainable parameter.
    pub fn backward(&self, tape: &ForwardTape, dz: &Array2<f32>) -> Grads {
        let net = self.network();
        let mut grads = Grads::default();
        let mut d = self.head_backward(&net, &tape.head, dz, &mut grads);
        for (si, stage) in net.stages.iter().enumerate().rev() {
            for (bi, block) in stage.blocks.iter().enumerate().rev() {
                let need_dx = !(si == 0 && bi == 0);
                match block.backward(&self.store, &tape.stages[si][bi], &d, &mut grads, need_dx) {
                    Some(dx) => d = dx,
                    None => break,
                }
            }
        }
        grads
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        nn::apply_bn_updates(&mut self.store, updates);
    }

    /// Inference-mode activation of `stage` and the gradient of `score(features)` with respect
    /// to it, where `dscore` maps the tapped features to their gradient.
    pub(crate) fn stage_activation_and_gradient(
        &self,
        images: &Array4<f32>,
        stage: &str,
        tap: FeatureTap,
        dscore: impl Fn(&Array2<f32>) -> Array2<f32>,
    ) -> Result<(Array4<f32>, Array4<f32>, Array2<f32>)> {
        let net = self.network();
        let target = net
            .stages
            .iter()
            .position(|s| s.name == stage)
            .ok_or_else(|| Error::invalid(format!("`{stage}` is not a convolutional stage")))?;
        let mut updates = Vec::new();
        let (fmap, caches, outputs) = self.backbone_forward(&net, images, Mode::Eval, &mut updates)?;
        let mut grads = Grads::default();
        let (features, mut d) = match tap {
            FeatureTap::BackbonePooled => {
                let pooled = global_avg_pool(&fmap);
                let dp = dscore(&pooled);
                let (_, _, h, w) = fmap.dim();
                (pooled, global_avg_pool_backward(&dp, h, w))
            }
            FeatureTap::ProjectionOutput => {
                let (z, cache) = self.head_forward(&net, &fmap, Mode::Eval, &mut updates)?;
                let dz = dscore(&z);
                (z.clone(), self.head_backward(&net, &cache, &dz, &mut grads))
            }
        };
        for si in (target + 1..net.stages.len()).rev() {
            for (bi, block) in net.stages[si].blocks.iter().enumerate().rev() {
                d = block
                    .backward(&self.store, &caches[si][bi], &d, &mut grads, true)
                    .expect("requested dx");
            }
        }
        Ok((outputs[target].clone(), d, features))
    }
}
