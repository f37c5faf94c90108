//! Minimal CPU layer library with hand-written backward passes.
//!
//! Tensors are `f32` in NCHW layout. Every layer exposes a forward function that returns
//! whatever its backward needs, and a backward function that accumulates parameter
//! gradients into a [`Grads`] map and returns the input gradient.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm; running statistics are updated.
    Train,
    /// Running statistics in batch-norm.
    Eval,
}

/// Named trainable tensors plus non-trainable buffers (batch-norm running statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, ArrayD<f32>>,
    pub buffers: BTreeMap<String, ArrayD<f32>>,
}

impl ParamStore {
    pub fn param(&self, name: &str) -> &ArrayD<f32> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    pub fn buffer(&self, name: &str) -> &ArrayD<f32> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("buffer `{name}` missing from store"))
    }

    pub(crate) fn param1(&self, name: &str) -> ndarray::ArrayView1<'_, f32> {
        self.param(name)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("rank-1 parameter")
    }

    pub(crate) fn param2(&self, name: &str) -> ArrayView2<'_, f32> {
        self.param(name)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("rank-2 parameter")
    }

    pub(crate) fn buffer1(&self, name: &str) -> ndarray::ArrayView1<'_, f32> {
        self.buffer(name)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("rank-1 buffer")
    }

    pub fn num_trainable(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .chain(self.buffers.values())
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradient accumulator keyed by parameter name.
#[derive(Debug, Default, Clone)]
pub struct Grads(pub BTreeMap<String, ArrayD<f32>>);

impl Grads {
    pub fn accumulate(&mut self, name: &str, g: ArrayD<f32>) {
        match self.0.get_mut(name) {
            Some(existing) => *existing += &g,
            None => {
                self.0.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.0.get(name)
    }

    pub fn merge(&mut self, other: Grads) {
        for (k, v) in other.0 {
            self.accumulate(&k, v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Running-statistic update produced by a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Array1<f32>,
    pub var_unbiased: Array1<f32>,
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn weight_matrix<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f32> {
        let w = store.param(&self.weight_name());
        w.view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("contiguous conv weight")
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "{} expects {} input channels, got {c}",
                self.name, self.in_channels
            )));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Shape(format!(
                "{} input {h}x{w} is smaller than the kernel",
                self.name
            )));
        }
        Ok(())
    }

    fn im2col(&self, x: ArrayView3<f32>) -> Array2<f32> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let out = cols.as_slice_mut().expect("fresh array");
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let base = row * oh * ow;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = ci * h * w + iy as usize * w;
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                out[base + oy * ow + ox] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f32>, c: usize, h: usize, w: usize) -> Array1<f32> {
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let mut img = Array1::<f32>::zeros(c * h * w);
        let out = img.as_slice_mut().expect("fresh array");
        let cs = cols.as_slice().expect("standard layout");
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let base = row * oh * ow;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = ci * h * w + iy as usize * w;
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                out[dst + ix as usize] += cs[base + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        img
    }

    pub fn forward(&self, store: &ParamStore, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let wm = self.weight_matrix(store);
        let outs: Vec<Array2<f32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = x.index_axis(Axis(0), i);
                if self.is_pointwise() {
                    let flat = xi.as_standard_layout().into_owned();
                    let flat = flat
                        .into_shape_with_order((self.in_channels, h * w))
                        .expect("contiguous");
                    wm.dot(&flat)
                } else {
                    wm.dot(&self.im2col(xi))
                }
            })
            .collect();
        let mut y = Array4::<f32>::zeros((n, self.out_channels, oh, ow));
        for (i, o) in outs.into_iter().enumerate() {
            y.index_axis_mut(Axis(0), i).assign(
                &o.into_shape_with_order((self.out_channels, oh, ow))
                    .expect("contiguous"),
            );
        }
        Ok(y)
    }

    /// Accumulates the weight gradient and returns the input gradient when `need_dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array4<f32>,
        dy: &Array4<f32>,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Array4<f32>> {
        let (n, c, h, w) = x.dim();
        let (_, o, oh, ow) = dy.dim();
        let wm = self.weight_matrix(store);
        let parts: Vec<(Array2<f32>, Option<Array1<f32>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let dyi = dy
                    .index_axis(Axis(0), i)
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((o, oh * ow))
                    .expect("contiguous");
                let xi = x.index_axis(Axis(0), i);
                let cols = if self.is_pointwise() {
                    xi.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((c, h * w))
                        .expect("contiguous")
                } else {
                    self.im2col(xi)
                };
                let dw = dyi.dot(&cols.t());
                let dx = need_dx.then(|| {
                    let dcols = wm.t().dot(&dyi);
                    if self.is_pointwise() {
                        dcols.into_shape_with_order(c * h * w).expect("contiguous")
                    } else {
                        self.col2im(&dcols, c, h, w)
                    }
                });
                (dw, dx)
            })
            .collect();
        let mut dw_total = Array2::<f32>::zeros(wm.dim());
        let mut dx = need_dx.then(|| Array4::<f32>::zeros((n, c, h, w)));
        for (i, (dw, dxi)) in parts.into_iter().enumerate() {
            dw_total += &dw;
            if let (Some(dx), Some(dxi)) = (dx.as_mut(), dxi) {
                dx.index_axis_mut(Axis(0), i)
                    .assign(&dxi.into_shape_with_order((c, h, w)).expect("contiguous"));
            }
        }
        grads.accumulate(
            &self.weight_name(),
            dw_total
                .into_shape_with_order(self.weight_shape())
                .expect("contiguous")
                .into_dyn(),
        );
        dx
    }
}

// ---------------------------------------------------------------------------
// Batch normalisation over (N, C, H, W); dense activations use H = W = 1.

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.weight", self.name)
    }
    pub fn beta_name(&self) -> String {
        format!("{}.bias", self.name)
    }
    pub fn mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }
    pub fn var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Array4<f32>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Array4<f32>, BnCache)> {
        let (n, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::Shape(format!(
                "{} expects {} channels, got {c}",
                self.name, self.channels
            )));
        }
        let count = (n * h * w) as f32;
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let mean = x
                    .mean_axis(Axis(3))
                    .unwrap()
                    .mean_axis(Axis(2))
                    .unwrap()
                    .mean_axis(Axis(0))
                    .unwrap();
                let mut var = Array1::<f32>::zeros(c);
                for ci in 0..c {
                    let m = mean[ci];
                    var[ci] = x
                        .slice(s![.., ci, .., ..])
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f32>()
                        / count;
                }
                let unbiased = if count > 1.0 {
                    &var * (count / (count - 1.0))
                } else {
                    var.clone()
                };
                updates.push(BnUpdate {
                    name: self.name.clone(),
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                });
                let inv = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                (mean, inv)
            }
            Mode::Eval => {
                let mean = store.buffer1(&self.mean_name()).to_owned();
                let inv = store.buffer1(&self.var_name()).mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                (mean, inv)
            }
        };
        let gamma = store.param1(&self.gamma_name());
        let beta = store.param1(&self.beta_name());
        let mut xhat = x.clone();
        let mut y = Array4::<f32>::zeros(x.dim());
        for ci in 0..c {
            let (m, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            let mut xs = xhat.slice_mut(s![.., ci, .., ..]);
            xs.mapv_inplace(|v| (v - m) * is);
            Zip::from(y.slice_mut(s![.., ci, .., ..]))
                .and(&xs)
                .for_each(|o, &v| *o = g * v + b);
        }
        Ok((y, BnCache { xhat, inv_std, mode }))
    }

    pub fn backward(&self, store: &ParamStore, cache: &BnCache, dy: &Array4<f32>, grads: &mut Grads) -> Array4<f32> {
        let (n, c, h, w) = dy.dim();
        let count = (n * h * w) as f32;
        let gamma = store.param1(&self.gamma_name());
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        let mut dx = Array4::<f32>::zeros(dy.dim());
        for ci in 0..c {
            let dys = dy.slice(s![.., ci, .., ..]);
            let xh = cache.xhat.slice(s![.., ci, .., ..]);
            let sum_dy: f32 = dys.sum();
            let sum_dy_xh: f32 = Zip::from(&dys).and(&xh).fold(0.0, |acc, &a, &b| acc + a * b);
            dgamma[ci] = sum_dy_xh;
            dbeta[ci] = sum_dy;
            let scale = gamma[ci] * cache.inv_std[ci];
            let mut dxs = dx.slice_mut(s![.., ci, .., ..]);
            match cache.mode {
                Mode::Train => {
                    let mean_dy = sum_dy / count;
                    let mean_dy_xh = sum_dy_xh / count;
                    Zip::from(&mut dxs).and(&dys).and(&xh).for_each(|o, &g, &xv| {
                        *o = scale * (g - mean_dy - xv * mean_dy_xh);
                    });
                }
                Mode::Eval => {
                    Zip::from(&mut dxs).and(&dys).for_each(|o, &g| *o = scale * g);
                }
            }
        }
        grads.accumulate(&self.gamma_name(), dgamma.into_dyn());
        grads.accumulate(&self.beta_name(), dbeta.into_dyn());
        dx
    }
}

pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var_unbiased)] {
            let key = format!("{}.{suffix}", u.name);
            if let Some(buf) = store.buffers.get_mut(&key) {
                let mut view = buf.view_mut().into_dimensionality::<Ix1>().expect("rank-1 buffer");
                Zip::from(&mut view)
                    .and(batch)
                    .for_each(|r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Element-wise and pooling layers

pub fn relu(x: Array4<f32>) -> Array4<f32> {
    x.mapv_into(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// 3x3 stride-2 max pooling with padding 1. Returns the output and flat argmax positions.
pub fn max_pool_3x3_s2(x: &Array4<f32>) -> (Array4<f32>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 - 3) / 2 + 1;
    let ow = (w + 2 - 3) / 2 + 1;
    let mut y = Array4::<f32>::zeros((n, c, oh, ow));
    let mut arg = vec![0usize; n * c * oh * ow];
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard");
    let ys = y.as_slice_mut().expect("fresh");
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if xs[idx] > best {
                            best = xs[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                ys[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(input_dim: (usize, usize, usize, usize), argmax: &[usize], dy: &Array4<f32>) -> Array4<f32> {
    let mut dx = Array4::<f32>::zeros(input_dim);
    let dxs = dx.as_slice_mut().expect("fresh");
    let dys = dy.as_standard_layout();
    for (o, &g) in dys.iter().enumerate() {
        dxs[argmax[o]] += g;
    }
    dx
}

pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f32;
    let mut out = Array2::<f32>::zeros((n, c));
    for ((i, ci), o) in out.indexed_iter_mut() {
        *o = x.slice(s![i, ci, .., ..]).sum() / area;
    }
    out
}

pub fn global_avg_pool_backward(dy: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c) = dy.dim();
    let area = (h * w) as f32;
    Array4::from_shape_fn((n, c, h, w), |(i, ci, _, _)| dy[[i, ci]] / area)
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

impl Dense {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }
    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.in_features {
            return Err(Error::Shape(format!(
                "{} expects {} inputs, got {}",
                self.name,
                self.in_features,
                x.ncols()
            )));
        }
        let mut y = x.dot(&store.param2(&self.weight_name()).t());
        if self.bias {
            y += &store.param1(&self.bias_name());
        }
        Ok(y)
    }

    pub fn backward(&self, store: &ParamStore, x: &Array2<f32>, dy: &Array2<f32>, grads: &mut Grads) -> Array2<f32> {
        grads.accumulate(&self.weight_name(), dy.t().dot(x).into_dyn());
        if self.bias {
            grads.accumulate(&self.bias_name(), dy.sum_axis(Axis(0)).into_dyn());
        }
        dy.dot(&store.param2(&self.weight_name()))
    }
}

pub(crate) fn as_nchw(x: Array2<f32>) -> Array4<f32> {
    let (n, c) = x.dim();
    x.into_shape_with_order((n, c, 1, 1)).expect("contiguous")
}

pub(crate) fn from_nchw(x: Array4<f32>) -> Array2<f32> {
    let (n, c, _, _) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c))
        .expect("contiguous")
}
