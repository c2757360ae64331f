//! Desk-scale two-branch embedding network.
//!
//! A three-layer 3×3 convolutional trunk (16 channels, tanh, one stride-2
//! stage) feeds two 1×1 heads: a segmentation logit squashed to a
//! probability, and a raw 3-d pixel embedding. Both outputs live at half the
//! input resolution. Backpropagation is written out by hand.

pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{EmbeddingField, ImageGrid, LabelMap, Mask};

pub use gradcheck::{run_gradcheck, GradcheckReport};
pub use loss::{dice_loss, discriminative_loss, LossConfig};
pub use optim::{adamw_step, adamw_step_model, AdamWState, OptimConfig};
pub use train::{split_train_val, train, EpochLog, Sample, TrainConfig, TrainOutcome};

pub const TRUNK_CHANNELS: usize = 16;
pub const EMBED_DIM: usize = 3;
/// Ratio between input and head resolution.
pub const DOWNSAMPLE: usize = 2;

/// Architecture summary written next to checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub trunk_channels: usize,
    pub trunk_layers: usize,
    pub kernel: usize,
    pub downsample: usize,
    pub embed_dim: usize,
    pub activation: String,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            trunk_channels: TRUNK_CHANNELS,
            trunk_layers: 3,
            kernel: 3,
            downsample: DOWNSAMPLE,
            embed_dim: EMBED_DIM,
            activation: "tanh".into(),
        }
    }
}

/// Square convolution with zero padding `kernel / 2`.
/// Weights are laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv2d {
    fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    /// Output positions `o` whose tap `o * stride + k - pad` falls inside `0..n_in`.
    fn valid_outputs(&self, k: usize, n_in: usize, n_out: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride as isize, self.pad() as isize);
        let off = k as isize - p;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((n_in as isize - 1 - off).div_euclid(s) + 1).clamp(0, n_out as isize);
        lo as usize..(hi as usize).max(lo as usize)
    }

    fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let (oh, ow) = (self.out_extent(input.h), self.out_extent(input.w));
        let mut out = FeatureMap::zeros(self.out_ch, oh, ow);
        let (s, p) = (self.stride, self.pad());
        for oc in 0..self.out_ch {
            let plane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
            plane.fill(self.bias[oc]);
            for ic in 0..self.in_ch {
                let src = input.plane(ic);
                for ky in 0..self.kernel {
                    let rows = self.valid_outputs(ky, input.h, oh);
                    for kx in 0..self.kernel {
                        let wv = self.weight[((oc * self.in_ch + ic) * self.kernel + ky) * self.kernel + kx];
                        let cols = self.valid_outputs(kx, input.w, ow);
                        for oy in rows.clone() {
                            let iy = oy * s + ky - p;
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            let row = &src[iy * input.w..(iy + 1) * input.w];
                            for ox in cols.clone() {
                                dst[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` and returns the input gradient.
    fn backward(&self, input: &FeatureMap, d_out: &FeatureMap, grad: &mut Conv2d, need_input: bool) -> Option<FeatureMap> {
        let (oh, ow) = (d_out.h, d_out.w);
        let (s, p) = (self.stride, self.pad());
        let mut d_in = need_input.then(|| FeatureMap::zeros(self.in_ch, input.h, input.w));
        for oc in 0..self.out_ch {
            let g = d_out.plane(oc);
            grad.bias[oc] += g.iter().sum::<f64>();
            for ic in 0..self.in_ch {
                let src = input.plane(ic);
                for ky in 0..self.kernel {
                    let rows = self.valid_outputs(ky, input.h, oh);
                    for kx in 0..self.kernel {
                        let widx = ((oc * self.in_ch + ic) * self.kernel + ky) * self.kernel + kx;
                        let wv = self.weight[widx];
                        let cols = self.valid_outputs(kx, input.w, ow);
                        let mut acc = 0.0;
                        for oy in rows.clone() {
                            let iy = oy * s + ky - p;
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            let row = &src[iy * input.w..(iy + 1) * input.w];
                            for ox in cols.clone() {
                                acc += grow[ox] * row[ox * s + kx - p];
                            }
                            if let Some(d_in) = d_in.as_mut() {
                                let w_in = input.w;
                                let drow = &mut d_in.data[(ic * input.h + iy) * w_in..(ic * input.h + iy + 1) * w_in];
                                for ox in cols.clone() {
                                    drow[ox * s + kx - p] += wv * grow[ox];
                                }
                            }
                        }
                        grad.weight[widx] += acc;
                    }
                }
            }
        }
        d_in
    }
}

/// Channel-major activation volume.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

/// All trainable tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub(crate) conv1: Conv2d,
    pub(crate) conv2: Conv2d,
    pub(crate) conv3: Conv2d,
    pub(crate) seg_head: Conv2d,
    pub(crate) emb_head: Conv2d,
}

impl ModelParams {
    pub fn zeros() -> Self {
        let c = TRUNK_CHANNELS;
        Self {
            conv1: Conv2d::zeros(1, c, 3, 1),
            conv2: Conv2d::zeros(c, c, 3, DOWNSAMPLE),
            conv3: Conv2d::zeros(c, c, 3, 1),
            seg_head: Conv2d::zeros(c, 1, 1, 1),
            emb_head: Conv2d::zeros(c, EMBED_DIM, 1, 1),
        }
    }

    /// Uniform fan-in scaled weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros();
        for layer in params.layers_mut() {
            let fan_in = (layer.in_ch * layer.kernel * layer.kernel) as f64;
            let bound = (3.0 / fan_in).sqrt();
            for w in &mut layer.weight {
                *w = rng.random_range(-bound..bound);
            }
        }
        params
    }

    fn layers(&self) -> [&Conv2d; 5] {
        [&self.conv1, &self.conv2, &self.conv3, &self.seg_head, &self.emb_head]
    }

    fn layers_mut(&mut self) -> [&mut Conv2d; 5] {
        [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.seg_head,
            &mut self.emb_head,
        ]
    }

    const NAMES: [&'static str; 5] = ["trunk.conv1", "trunk.conv2", "trunk.conv3", "seg_head", "emb_head"];

    /// `(name, dims, values)` for every tensor, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(10);
        for (name, layer) in Self::NAMES.iter().zip(self.layers()) {
            out.push((format!("{name}.weight"), layer.weight_dims().to_vec(), layer.weight()));
            out.push((format!("{name}.bias"), vec![layer.out_ch], layer.bias()));
        }
        out
    }

    /// Rebuild from named tensors; every expected name must be present with the right shape.
    pub fn from_named_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a [usize], Vec<f64>)>) -> Result<Self> {
        let mut params = Self::zeros();
        let mut seen = std::collections::BTreeSet::new();
        for (name, dims, values) in tensors {
            let (layer_name, kind) = name
                .rsplit_once('.')
                .ok_or_else(|| Error::Config(format!("unexpected tensor name {name}")))?;
            let idx = Self::NAMES
                .iter()
                .position(|n| *n == layer_name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor name {name}")))?;
            let layer = params.layers_mut().into_iter().nth(idx).expect("index from NAMES");
            let (target, expected): (&mut Vec<f64>, Vec<usize>) = match kind {
                "weight" => {
                    let d = layer.weight_dims().to_vec();
                    (&mut layer.weight, d)
                }
                "bias" => {
                    let d = vec![layer.out_ch];
                    (&mut layer.bias, d)
                }
                _ => return Err(Error::Config(format!("unexpected tensor name {name}"))),
            };
            if dims != expected.as_slice() || values.len() != target.len() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {dims:?}, expected {expected:?}"
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("tensor {name} has non-finite values")));
            }
            *target = values;
            seen.insert(name.to_string());
        }
        if seen.len() != 2 * Self::NAMES.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} of {} tensors",
                seen.len(),
                2 * Self::NAMES.len()
            )));
        }
        Ok(params)
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flat copy in `named_tensors` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for l in self.layers_mut() {
            let n = l.weight.len();
            l.weight.copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub(crate) fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.layers_mut().into_iter().zip(other.layers()) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub(crate) fn scale(&mut self, factor: f64) {
        for l in self.layers_mut() {
            for x in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *x *= factor;
            }
        }
    }
}

/// Intermediate activations kept for backpropagation.
pub(crate) struct ForwardCache {
    input: FeatureMap,
    a1: FeatureMap,
    a2: FeatureMap,
    a3: FeatureMap,
    prob: Vec<f64>,
    emb: FeatureMap,
}

fn tanh_inplace(map: &mut FeatureMap) {
    for v in &mut map.data {
        *v = v.tanh();
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Head-resolution dims for an input of the given dims.
pub fn head_dims(height: usize, width: usize) -> (usize, usize) {
    (height / DOWNSAMPLE, width / DOWNSAMPLE)
}

fn check_input(image: &ImageGrid) -> Result<()> {
    let (h, w) = image.dims();
    if h < DOWNSAMPLE || w < DOWNSAMPLE || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(Error::invalid(format!(
            "input {h}x{w} must have both dims divisible by {DOWNSAMPLE}"
        )));
    }
    Ok(())
}

pub(crate) fn forward_cached(params: &ModelParams, image: &ImageGrid) -> Result<ForwardCache> {
    check_input(image)?;
    let input = FeatureMap {
        c: 1,
        h: image.height(),
        w: image.width(),
        data: image.values().to_vec(),
    };
    let mut a1 = params.conv1.forward(&input);
    tanh_inplace(&mut a1);
    let mut a2 = params.conv2.forward(&a1);
    tanh_inplace(&mut a2);
    let mut a3 = params.conv3.forward(&a2);
    tanh_inplace(&mut a3);
    let prob: Vec<f64> = params.seg_head.forward(&a3).data.into_iter().map(sigmoid).collect();
    let emb = params.emb_head.forward(&a3);
    if prob.iter().chain(&emb.data).any(|v: &f64| !v.is_finite()) {
        return Err(Error::Numeric("network produced non-finite outputs".into()));
    }
    Ok(ForwardCache {
        input,
        a1,
        a2,
        a3,
        prob,
        emb,
    })
}

impl ForwardCache {
    pub(crate) fn dims(&self) -> (usize, usize) {
        (self.a3.h, self.a3.w)
    }

    pub(crate) fn seg_prob(&self) -> ImageGrid {
        ImageGrid::new(self.a3.h, self.a3.w, self.prob.clone()).expect("head dims are valid")
    }

    pub(crate) fn embeddings(&self) -> EmbeddingField {
        let (h, w) = self.dims();
        let n = h * w;
        let mut values = Vec::with_capacity(n * EMBED_DIM);
        for i in 0..n {
            for c in 0..EMBED_DIM {
                values.push(self.emb.data[c * n + i]);
            }
        }
        EmbeddingField::new(h, w, EMBED_DIM, values).expect("head dims are valid")
    }

    /// Parameter gradients given dL/dprob (per head pixel) and dL/demb (pixel-major).
    pub(crate) fn backward(&self, params: &ModelParams, d_prob: &[f64], d_emb: &EmbeddingField) -> ModelParams {
        let (h, w) = self.dims();
        let n = h * w;
        let mut grad = ModelParams::zeros();
        let d_logit = FeatureMap {
            c: 1,
            h,
            w,
            data: d_prob
                .iter()
                .zip(&self.prob)
                .map(|(g, p)| g * p * (1.0 - p))
                .collect(),
        };
        let mut d_emb_map = FeatureMap::zeros(EMBED_DIM, h, w);
        for i in 0..n {
            for c in 0..EMBED_DIM {
                d_emb_map.data[c * n + i] = d_emb.values()[i * EMBED_DIM + c];
            }
        }
        let mut d_a3 = params
            .seg_head
            .backward(&self.a3, &d_logit, &mut grad.seg_head, true)
            .expect("requested");
        let d_a3_emb = params
            .emb_head
            .backward(&self.a3, &d_emb_map, &mut grad.emb_head, true)
            .expect("requested");
        for (a, b) in d_a3.data.iter_mut().zip(&d_a3_emb.data) {
            *a += b;
        }
        let through_tanh = |d: &mut FeatureMap, act: &FeatureMap| {
            for (g, a) in d.data.iter_mut().zip(&act.data) {
                *g *= 1.0 - a * a;
            }
        };
        through_tanh(&mut d_a3, &self.a3);
        let mut d_a2 = params
            .conv3
            .backward(&self.a2, &d_a3, &mut grad.conv3, true)
            .expect("requested");
        through_tanh(&mut d_a2, &self.a2);
        let mut d_a1 = params
            .conv2
            .backward(&self.a1, &d_a2, &mut grad.conv2, true)
            .expect("requested");
        through_tanh(&mut d_a1, &self.a1);
        params.conv1.backward(&self.input, &d_a1, &mut grad.conv1, false);
        grad
    }
}

/// Segmentation probabilities and raw embeddings, both at half resolution.
pub fn forward(params: &ModelParams, image: &ImageGrid) -> Result<(ImageGrid, EmbeddingField)> {
    let cache = forward_cached(params, image)?;
    Ok((cache.seg_prob(), cache.embeddings()))
}

/// Loss value split by component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dice: f64,
    pub discriminative: f64,
}

/// Weighted Dice + discriminative loss and its exact parameter gradient.
/// Targets are given at head resolution.
pub fn total_loss_and_grad(
    params: &ModelParams,
    image: &ImageGrid,
    seg_target: &Mask,
    instance_labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ModelParams)> {
    cfg.validate()?;
    let cache = forward_cached(params, image)?;
    let dims = cache.dims();
    if seg_target.dims() != dims || instance_labels.dims() != dims {
        return Err(Error::invalid(format!(
            "targets must be at head resolution {dims:?}, got {:?} and {:?}",
            seg_target.dims(),
            instance_labels.dims()
        )));
    }
    let prob = cache.seg_prob();
    let (dice, d_dice) = loss::dice_loss_with_grad(&prob, seg_target)?;
    let (disc, mut d_emb) = discriminative_loss(&cache.embeddings(), instance_labels, cfg)?;
    let d_prob: Vec<f64> = d_dice.iter().map(|g| g * cfg.w_dice).collect();
    for g in d_emb.values_mut() {
        *g *= cfg.w_disc;
    }
    let grad = cache.backward(params, &d_prob, &d_emb);
    let total = cfg.w_dice * dice + cfg.w_disc * disc;
    Ok((
        LossBreakdown {
            total,
            dice,
            discriminative: disc,
        },
        grad,
    ))
}

/// Loss only, without backpropagation.
pub fn total_loss(
    params: &ModelParams,
    image: &ImageGrid,
    seg_target: &Mask,
    instance_labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let (prob, emb) = forward(params, image)?;
    let dice = dice_loss(&prob, seg_target)?;
    let (disc, _) = discriminative_loss(&emb, instance_labels, cfg)?;
    Ok(LossBreakdown {
        total: cfg.w_dice * dice + cfg.w_disc * disc,
        dice,
        discriminative: disc,
    })
}
