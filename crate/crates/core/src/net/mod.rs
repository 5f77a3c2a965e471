//! A small U-Net style segmentation network with hand-written reverse-mode
//! gradients down to the input.
//!
//! A [`Model`] is an ordered list of [`Layer`]s evaluated by a tiny
//! interpreter with a skip stack: [`Layer::PushSkip`] saves the current map,
//! [`Layer::ConcatSkip`] pops it and appends it as extra channels. Every
//! convolution owns a named [`ConvParam`].

pub mod checkpoint;
pub mod ops;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ops::{ConvShape, Fmap};

pub use train::{mean_dice, train, EvalPoint, TrainConfig, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of stacked slices `N`; must be odd.
    pub in_channels: usize,
    /// Encoder widths per depth. Depths beyond the list reuse the last width.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Number of 2× poolings.
    pub levels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            widths: vec![8, 16],
            kernel: 3,
            levels: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "in_channels must be odd, got {}",
                self.in_channels
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be a non-empty list of positive counts".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.levels > 8 {
            return Err(Error::Config(format!("levels {} is unreasonably deep", self.levels)));
        }
        Ok(())
    }

    fn width_at(&self, depth: usize) -> usize {
        self.widths[depth.min(self.widths.len() - 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv(usize),
    Relu,
    MaxPool2,
    Upsample2,
    PushSkip,
    ConcatSkip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// The convolution that reads the stacked input slices.
    FirstConv,
    Hidden,
    /// Final 1×1 projection to the logit channel.
    Head,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::FirstConv => "first_conv",
            ParamRole::Hidden => "hidden",
            ParamRole::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "first_conv" => Some(ParamRole::FirstConv),
            "hidden" => Some(ParamRole::Hidden),
            "head" => Some(ParamRole::Head),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParam {
    pub name: String,
    pub out_c: usize,
    pub in_c: usize,
    pub k: usize,
    /// `[out_c, in_c, k, k]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub role: ParamRole,
}

impl ConvParam {
    pub fn shape(&self) -> ConvShape {
        ConvShape {
            out_c: self.out_c,
            in_c: self.in_c,
            k: self.k,
        }
    }

    pub fn weight_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.out_c, self.in_c, self.k, self.k], self.weight.clone())
            .expect("consistent conv shape")
    }

    pub fn bias_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.out_c], self.bias.clone()).expect("consistent bias shape")
    }

    fn he_init(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = (self.in_c * self.k * self.k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
        self.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Gradients matching a model's parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weight: Vec<Vec<f32>>,
    pub bias: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(m: &Model) -> Self {
        Grads {
            weight: m.params.iter().map(|p| vec![0.0; p.weight.len()]).collect(),
            bias: m.params.iter().map(|p| vec![0.0; p.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.weight.iter_mut().flatten().for_each(|x| *x *= s);
        self.bias.iter_mut().flatten().for_each(|x| *x *= s);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    in_channels: usize,
    /// Spatial extents must be divisible by `2^levels`.
    levels: usize,
    layers: Vec<Layer>,
    params: Vec<ConvParam>,
}

/// Per-layer inputs recorded during a forward pass.
pub(crate) struct Trace {
    inputs: Vec<Fmap>,
    pool_idx: Vec<Option<Vec<u32>>>,
    concat_split: Vec<usize>,
    output: Fmap,
}

/// What a backward pass should produce.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Want {
    pub params: bool,
    pub input: bool,
    /// Capture the gradient flowing into this layer's output.
    pub tap: Option<usize>,
}

pub(crate) struct Backward {
    pub input: Option<Fmap>,
    pub grads: Option<Grads>,
    pub tap: Option<Fmap>,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let k = cfg.kernel;
    let mut params: Vec<ConvParam> = Vec::new();
    let mut layers = Vec::new();
    let mut conv = |name: String, in_c: usize, out_c: usize, k: usize, role: ParamRole| {
        params.push(ConvParam {
            name,
            out_c,
            in_c,
            k,
            weight: vec![0.0; out_c * in_c * k * k],
            bias: vec![0.0; out_c],
            role,
        });
        params.len() - 1
    };

    let mut c = cfg.in_channels;
    for d in 0..=cfg.levels {
        let wd = cfg.width_at(d);
        let role = if d == 0 { ParamRole::FirstConv } else { ParamRole::Hidden };
        let a = conv(format!("enc{d}.conv1"), c, wd, k, role);
        let b = conv(format!("enc{d}.conv2"), wd, wd, k, ParamRole::Hidden);
        layers.extend([Layer::Conv(a), Layer::Relu, Layer::Conv(b), Layer::Relu]);
        if d < cfg.levels {
            layers.extend([Layer::PushSkip, Layer::MaxPool2]);
        }
        c = wd;
    }
    for d in (0..cfg.levels).rev() {
        let wd = cfg.width_at(d);
        let a = conv(format!("dec{d}.conv1"), c + wd, wd, k, ParamRole::Hidden);
        let b = conv(format!("dec{d}.conv2"), wd, wd, k, ParamRole::Hidden);
        layers.extend([
            Layer::Upsample2,
            Layer::ConcatSkip,
            Layer::Conv(a),
            Layer::Relu,
            Layer::Conv(b),
            Layer::Relu,
        ]);
        c = wd;
    }
    let head = conv("head".into(), c, 1, 1, ParamRole::Head);
    layers.push(Layer::Conv(head));

    let mut m = Model {
        in_channels: cfg.in_channels,
        levels: cfg.levels,
        layers,
        params,
    };
    m.reinit(cfg.seed);
    Ok(m)
}

/// Name of the deepest encoder convolution of a model built from `cfg`.
pub fn default_cam_layer(cfg: &ModelConfig) -> String {
    format!("enc{}.conv2", cfg.levels)
}

impl Model {
    /// Assemble a model from an explicit layer list. Used for small test
    /// models and checkpoint loading.
    pub fn from_parts(
        in_channels: usize,
        levels: usize,
        layers: Vec<Layer>,
        params: Vec<ConvParam>,
    ) -> Result<Self> {
        let m = Model {
            in_channels,
            levels,
            layers,
            params,
        };
        m.check_structure()?;
        Ok(m)
    }

    fn check_structure(&self) -> Result<()> {
        let mut c = self.in_channels;
        let mut stack = Vec::new();
        let mut scale = 0isize;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv(p) => {
                    let prm = self
                        .params
                        .get(p)
                        .ok_or_else(|| Error::Config(format!("layer {i}: no parameter {p}")))?;
                    if prm.in_c != c {
                        return Err(Error::Shape(format!(
                            "layer {i} ({}) expects {} channels, receives {c}",
                            prm.name, prm.in_c
                        )));
                    }
                    if prm.k % 2 == 0
                        || prm.weight.len() != prm.out_c * prm.in_c * prm.k * prm.k
                        || prm.bias.len() != prm.out_c
                    {
                        return Err(Error::Shape(format!("parameter {} is malformed", prm.name)));
                    }
                    c = prm.out_c;
                }
                Layer::Relu => {}
                Layer::MaxPool2 => {
                    scale += 1;
                    if scale > self.levels as isize {
                        return Err(Error::Config(format!(
                            "layer {i}: more poolings than levels={}",
                            self.levels
                        )));
                    }
                }
                Layer::Upsample2 => scale -= 1,
                Layer::PushSkip => stack.push((c, scale)),
                Layer::ConcatSkip => {
                    let (sc, ss) = stack
                        .pop()
                        .ok_or_else(|| Error::Config(format!("layer {i}: empty skip stack")))?;
                    if ss != scale {
                        return Err(Error::Shape(format!("layer {i}: skip resolution mismatch")));
                    }
                    c += sc;
                }
            }
        }
        if c != 1 || scale != 0 || !stack.is_empty() {
            return Err(Error::Shape(
                "model must end in a single full-resolution logit channel".into(),
            ));
        }
        let first = self.first_conv_index()?;
        if self.params[first].in_c != self.in_channels {
            return Err(Error::Shape("first convolution does not read the input".into()));
        }
        Ok(())
    }

    /// Re-draw every parameter with He (fan-in) scaling from `seed`.
    pub fn reinit(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            p.he_init(&mut rng);
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[ConvParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ConvParam] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&ConvParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn first_conv_index(&self) -> Result<usize> {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Conv(p) => Some(*p),
                _ => None,
            })
            .ok_or_else(|| Error::Config("model has no convolution".into()))
    }

    pub fn first_conv(&self) -> &ConvParam {
        &self.params[self.first_conv_index().expect("validated model")]
    }

    pub fn first_conv_mut(&mut self) -> &mut ConvParam {
        let i = self.first_conv_index().expect("validated model");
        &mut self.params[i]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Names of convolutions whose output can be tapped for CAM methods.
    pub fn conv_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(p) => Some(self.params[*p].name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Layer index whose output is the activation for `name`: the conv itself,
    /// or its ReLU when one follows directly.
    pub(crate) fn tap_index(&self, name: &str) -> Result<usize> {
        let conv = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Conv(p) if self.params[*p].name == name))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown layer {name:?}; convolutions are {:?}",
                    self.conv_names()
                ))
            })?;
        Ok(match self.layers.get(conv + 1) {
            Some(Layer::Relu) => conv + 1,
            _ => conv,
        })
    }

    pub(crate) fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let div = 1usize << self.levels;
        if !h.is_multiple_of(div) || !w.is_multiple_of(div) {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 2^levels = {div}"
            )));
        }
        Ok(())
    }

    pub(crate) fn input_fmap(&self, x: &Tensor) -> Result<Fmap> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected input [N,H,W], got {s:?}")));
        }
        self.check_input(s[0], s[1], s[2])?;
        Ok(Fmap::from_vec(s[0], s[1], s[2], x.to_f32_vec()))
    }

    pub(crate) fn trace(&self, x: Fmap) -> Trace {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pool_idx = vec![None; n];
        let mut concat_split = vec![0; n];
        let mut stack: Vec<Fmap> = Vec::new();
        let mut cur = x;
        let first = self.first_conv_index().ok();
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match *layer {
                Layer::Conv(p) => {
                    let prm = &self.params[p];
                    conv_fwd(prm, &cur, Some(p) == first)
                }
                Layer::Relu => ops::relu(&cur),
                Layer::MaxPool2 => {
                    let (out, idx) = ops::maxpool2(&cur);
                    pool_idx[i] = Some(idx);
                    out
                }
                Layer::Upsample2 => ops::upsample2(&cur),
                Layer::PushSkip => {
                    stack.push(cur.clone());
                    cur.clone()
                }
                Layer::ConcatSkip => {
                    let skip = stack.pop().expect("validated skip stack");
                    concat_split[i] = cur.c;
                    ops::concat(&cur, &skip)
                }
            };
            inputs.push(std::mem::replace(&mut cur, next));
        }
        Trace {
            inputs,
            pool_idx,
            concat_split,
            output: cur,
        }
    }

    /// Forward pass without recording, on a raw feature map.
    pub(crate) fn logits_fmap(&self, x: Fmap) -> Fmap {
        let mut stack: Vec<Fmap> = Vec::new();
        let mut cur = x;
        let first = self.first_conv_index().ok();
        for layer in &self.layers {
            cur = match *layer {
                Layer::Conv(p) => conv_fwd(&self.params[p], &cur, Some(p) == first),
                Layer::Relu => ops::relu(&cur),
                Layer::MaxPool2 => ops::maxpool2(&cur).0,
                Layer::Upsample2 => ops::upsample2(&cur),
                Layer::PushSkip => {
                    stack.push(cur.clone());
                    cur
                }
                Layer::ConcatSkip => {
                    let skip = stack.pop().expect("validated skip stack");
                    ops::concat(&cur, &skip)
                }
            };
        }
        cur
    }

    pub(crate) fn backward(&self, t: &Trace, d_out: Fmap, want: Want) -> Backward {
        let mut grads = want.params.then(|| Grads::zeros_like(self));
        let mut g = d_out;
        let mut skip_grads: Vec<Fmap> = Vec::new();
        let mut tap = None;
        // earliest layer that needs to propagate a gradient to its input
        let stop = if want.input {
            0
        } else if want.params {
            self.first_conv_layer_pos()
        } else {
            want.tap.map_or(0, |t| t + 1)
        };
        for i in (0..self.layers.len()).rev() {
            if want.tap == Some(i) {
                tap = Some(g.clone());
                if !want.params && !want.input {
                    break;
                }
            }
            if i < stop {
                break;
            }
            let x = &t.inputs[i];
            g = match self.layers[i] {
                Layer::Conv(p) => {
                    let prm = &self.params[p];
                    let need_dx = i > 0 || want.input;
                    let (dx, pg) = ops::conv_backward(x, &g, prm.shape(), &prm.weight, want.params, need_dx);
                    if let (Some(gr), Some((dw, db))) = (grads.as_mut(), pg) {
                        gr.weight[p] = dw;
                        gr.bias[p] = db;
                    }
                    match dx {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                Layer::Relu => {
                    ops::relu_backward(x, &mut g);
                    g
                }
                Layer::MaxPool2 => {
                    ops::maxpool2_backward(x, t.pool_idx[i].as_ref().expect("pool indices"), &g)
                }
                Layer::Upsample2 => ops::upsample2_backward(&g),
                Layer::PushSkip => {
                    let s = skip_grads.pop().expect("matching concat");
                    g.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a += b);
                    g
                }
                Layer::ConcatSkip => {
                    let (a, b) = ops::split_channels(g, t.concat_split[i]);
                    skip_grads.push(b);
                    a
                }
            };
        }
        Backward {
            input: if want.input { Some(g) } else { None },
            grads,
            tap,
        }
    }

    fn first_conv_layer_pos(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Conv(_)))
            .unwrap_or(0)
    }
}

fn conv_fwd(prm: &ConvParam, x: &Fmap, canonical: bool) -> Fmap {
    ops::conv_forward(x, prm.shape(), &prm.weight, &prm.bias, canonical)
}

fn finite_or_err(f: &Fmap) -> Result<()> {
    if f.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step: 0,
            what: "non-finite logits".into(),
        })
    }
}

/// Logits `[1, H, W]` for one input `[N, H, W]`.
pub fn forward(m: &Model, x: &Tensor) -> Result<Tensor> {
    let xf = m.input_fmap(x)?;
    let (h, w) = (xf.h, xf.w);
    let out = m.logits_fmap(xf);
    finite_or_err(&out)?;
    Tensor::from_f32(vec![1, h, w], out.data)
}

/// Sigmoid probabilities `[1, H, W]`.
pub fn predict(m: &Model, x: &Tensor) -> Result<Tensor> {
    let logits = forward(m, x)?;
    let shape = logits.shape().to_vec();
    let probs = logits.into_f32().expect("f32").into_iter().map(ops::sigmoid).collect();
    Tensor::from_f32(shape, probs)
}

/// Mean over pixels of `log(1 + exp(-t·z))` with `t = ±1`, in the stable form
/// `max(z, 0) - z·y + log(1 + exp(-|z|))`. Accumulated in f64.
pub fn bce_with_logits(logits: &[f32], target: &[u8]) -> Result<f64> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "logits have {} values, target {}",
            logits.len(),
            target.len()
        )));
    }
    let sum: f64 = logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| {
            let z = z as f64;
            let y = if y > 0 { 1.0 } else { 0.0 };
            z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
        })
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Tensor form of [`bce_with_logits`]; the target must be binary.
pub fn bce_with_logits_tensor(logits: &Tensor, target: &Tensor) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let t: Vec<u8> = target
        .to_f64_vec()
        .into_iter()
        .map(|v| match v {
            v if v == 0.0 => Ok(0),
            v if v == 1.0 => Ok(1),
            v => Err(Error::Malformed(format!("target value {v} is not binary"))),
        })
        .collect::<Result<_>>()?;
    bce_with_logits(&logits.to_f32_vec(), &t)
}

/// Gradient of the mean BCE loss with respect to the logits.
pub(crate) fn bce_grad(logits: &[f32], target: &[u8]) -> Vec<f32> {
    let n = logits.len() as f32;
    logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| (ops::sigmoid(z) - f32::from(y.min(1))) / n)
        .collect()
}

fn weight_fmap(output_weights: &Tensor, h: usize, w: usize) -> Result<Vec<f32>> {
    let s = output_weights.shape();
    let ok = match s.len() {
        3 => s == [1, h, w],
        2 => s == [h, w],
        _ => false,
    };
    if !ok {
        return Err(Error::Shape(format!(
            "output weights {s:?} do not match logits [1,{h},{w}]"
        )));
    }
    Ok(output_weights.to_f32_vec())
}

/// `d/dz Σ wᵢ σ(zᵢ)` from a recorded forward pass.
fn prob_weighted_grad(logits: &[f32], weights: &[f32]) -> Vec<f32> {
    logits
        .iter()
        .zip(weights)
        .map(|(&z, &wt)| {
            let s = ops::sigmoid(z);
            wt * s * (1.0 - s)
        })
        .collect()
}

/// Raw-slice variant of [`grad_wrt_input`] used by the saliency engine.
pub(crate) fn input_gradient(m: &Model, x: Fmap, weights: &[f32]) -> Fmap {
    let (h, w) = (x.h, x.w);
    let t = m.trace(x);
    let d = prob_weighted_grad(&t.output.data, weights);
    let b = m.backward(
        &t,
        Fmap::from_vec(1, h, w, d),
        Want {
            input: true,
            ..Default::default()
        },
    );
    b.input.expect("input gradient requested")
}

/// Gradient of `Σ output_weights ⊙ σ(logits)` with respect to every input value.
pub fn grad_wrt_input(m: &Model, x: &Tensor, output_weights: &Tensor) -> Result<Tensor> {
    let xf = m.input_fmap(x)?;
    let (c, h, w) = (xf.c, xf.h, xf.w);
    let weights = weight_fmap(output_weights, h, w)?;
    let g = input_gradient(m, xf, &weights);
    Tensor::from_f32(vec![c, h, w], g.data)
}

/// Activation and its gradient at one tap point.
pub(crate) fn tap_activation(m: &Model, x: Fmap, tap: usize, weights: &[f32]) -> (Fmap, Fmap) {
    let (h, w) = (x.h, x.w);
    let t = m.trace(x);
    let d = prob_weighted_grad(&t.output.data, weights);
    let a = if tap + 1 < m.layers.len() {
        t.inputs[tap + 1].clone()
    } else {
        t.output.clone()
    };
    let b = m.backward(
        &t,
        Fmap::from_vec(1, h, w, d),
        Want {
            tap: Some(tap),
            ..Default::default()
        },
    );
    (a, b.tap.expect("tap gradient requested"))
}

/// Forward activations `A` at the named convolution (after its ReLU when one
/// follows) and the gradient `dA` of `Σ output_weights ⊙ σ(logits)` with respect to `A`.
pub fn activations_and_grads(
    m: &Model,
    x: &Tensor,
    layer_name: &str,
    output_weights: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let tap = m.tap_index(layer_name)?;
    let xf = m.input_fmap(x)?;
    let weights = weight_fmap(output_weights, xf.h, xf.w)?;
    let (a, da) = tap_activation(m, xf, tap, &weights);
    Ok((
        Tensor::from_f32(vec![a.c, a.h, a.w], a.data)?,
        Tensor::from_f32(vec![da.c, da.h, da.w], da.data)?,
    ))
}

/// Mean BCE loss and parameter gradients for one sample.
pub(crate) fn loss_and_grads(m: &Model, x: Fmap, target: &[u8]) -> (f64, Grads) {
    let (h, w) = (x.h, x.w);
    let t = m.trace(x);
    let loss = bce_with_logits(&t.output.data, target).expect("matching shapes");
    let d = bce_grad(&t.output.data, target);
    let b = m.backward(
        &t,
        Fmap::from_vec(1, h, w, d),
        Want {
            params: true,
            ..Default::default()
        },
    );
    (loss, b.grads.expect("parameter gradients requested"))
}

/// Mean BCE loss of one sample against a `[H, W]` binary target and the
/// gradient of that loss with respect to every parameter.
pub fn loss_gradients(m: &Model, x: &Tensor, target: &[u8]) -> Result<(f64, Grads)> {
    let xf = m.input_fmap(x)?;
    if target.len() != xf.h * xf.w {
        return Err(Error::Shape(format!(
            "target has {} values for a {}x{} input",
            target.len(),
            xf.h,
            xf.w
        )));
    }
    Ok(loss_and_grads(m, xf, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_f32(vec![c, h, w], (0..c * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn first_conv_shape_and_determinism() {
        let cfg = ModelConfig::default();
        let m = build_model(&cfg).unwrap();
        let first = m.first_conv();
        assert_eq!(first.weight_tensor().shape(), &[8, 3, 3, 3]);
        assert_eq!(first.role, ParamRole::FirstConv);
        assert_eq!(m, build_model(&cfg).unwrap());
        let other = build_model(&ModelConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(m, other);
    }

    #[test]
    fn even_channels_rejected() {
        let cfg = ModelConfig { in_channels: 4, ..Default::default() };
        assert!(matches!(build_model(&cfg), Err(Error::Config(_))));
        let cfg = ModelConfig { kernel: 2, ..Default::default() };
        assert!(build_model(&cfg).is_err());
        let cfg = ModelConfig { widths: vec![], ..Default::default() };
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn zero_input_gives_head_bias() {
        let mut m = build_model(&ModelConfig::default()).unwrap();
        for p in m.params_mut() {
            p.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let head = m.params().len() - 1;
        m.params_mut()[head].bias[0] = 0.37;
        let y = forward(&m, &Tensor::zeros_f32(vec![3, 16, 16]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16]);
        assert!(y.as_f32().unwrap().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn duplicated_samples_give_identical_logits() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let x = sample(3, 16, 16, 4);
        let batch = [x.clone(), x];
        let outs: Vec<Tensor> = batch.iter().map(|x| forward(&m, x).unwrap()).collect();
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let x = Tensor::zeros_f32(vec![3, 65, 64]).unwrap();
        assert!(matches!(forward(&m, &x), Err(Error::Shape(_))));
        let x = Tensor::zeros_f32(vec![5, 64, 64]).unwrap();
        assert!(matches!(forward(&m, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn bce_values() {
        assert!((bce_with_logits(&[0.0; 4], &[1, 0, 1, 0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(bce_with_logits(&[20.0, 20.0], &[1, 1]).unwrap() < 1e-8);
        assert!((bce_with_logits(&[0.0, 0.0], &[1, 0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_with_logits(&[0.0], &[1, 0]).is_err());
        let l = Tensor::from_f32(vec![2], vec![0.0, 0.0]).unwrap();
        let t = Tensor::from_u8(vec![2], vec![1, 2]).unwrap();
        assert!(bce_with_logits_tensor(&l, &t).is_err());
    }

    #[test]
    fn zero_weights_give_zero_input_gradient() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let x = sample(3, 16, 16, 1);
        let g = grad_wrt_input(&m, &x, &Tensor::zeros_f32(vec![1, 16, 16]).unwrap()).unwrap();
        assert!(g.as_f32().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn final_conv_tap_has_one_channel_and_local_gradient() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let x = sample(3, 16, 16, 2);
        let mut wts = vec![0.0f32; 256];
        wts[17] = 1.0;
        wts[200] = 1.0;
        let wt = Tensor::from_f32(vec![1, 16, 16], wts.clone()).unwrap();
        let (a, da) = activations_and_grads(&m, &x, "head", &wt).unwrap();
        assert_eq!(a.shape()[0], 1);
        for (g, w) in da.as_f32().unwrap().iter().zip(&wts) {
            if *w == 0.0 {
                assert_eq!(*g, 0.0);
            }
        }
        assert!(activations_and_grads(&m, &x, "nope", &wt).is_err());
    }
}
