//! Per-channel saliency maps for a frozen model.
//!
//! Gradient methods differentiate `Σ w ⊙ σ(logits)` with respect to the
//! input and keep `|gradient|`. Occlusion replaces one channel's patch with
//! that channel's mean. The CAM methods tap an intermediate activation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::net::ops::{sigmoid, Fmap};
use crate::net::{input_gradient, tap_activation, Model};
use crate::tensor::{ntf_read, ntf_write, plane_mean, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Foreground,
    FullOutput,
    Foreground100,
    FullOutput100,
    Occlusion,
    #[serde(rename = "gradcampp_channel")]
    GradCamPpChannel,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Foreground,
        Method::FullOutput,
        Method::Foreground100,
        Method::FullOutput100,
        Method::Occlusion,
        Method::GradCamPpChannel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Foreground => "foreground",
            Method::FullOutput => "full_output",
            Method::Foreground100 => "foreground100",
            Method::FullOutput100 => "full_output100",
            Method::Occlusion => "occlusion",
            Method::GradCamPpChannel => "gradcampp_channel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_unstable(self) -> bool {
        self == Method::GradCamPpChannel
    }
}

/// How a channel-occluded CAM becomes that channel's plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMode {
    /// `|cam(x) − cam(x with channel c at its mean)|`
    #[default]
    Difference,
    /// `cam(x with channel c at its mean)`
    Occluded,
}

impl CamMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "difference" => Some(CamMode::Difference),
            "occluded" => Some(CamMode::Occluded),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Full,
    Foreground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyParams {
    /// Probability threshold of the foreground mask.
    pub threshold: f32,
    /// Output points drawn by the sampled methods.
    pub k: usize,
    pub seed: u64,
    pub patch: usize,
    /// CAM tap; `None` means the deepest encoder convolution.
    pub layer: Option<String>,
    pub cam_mode: CamMode,
    /// Must be set to run [`Method::GradCamPpChannel`].
    pub unstable: bool,
}

impl Default for SaliencyParams {
    fn default() -> Self {
        SaliencyParams {
            threshold: 0.85,
            k: 100,
            seed: 0,
            patch: 16,
            layer: None,
            cam_mode: CamMode::Difference,
            unstable: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMeta {
    pub sample_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cam_mode: Option<CamMode>,
    /// Foreground pixel count of the prediction mask, when one was used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_pixels: Option<usize>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `[N, H, W]`, nonnegative.
    pub values: Tensor,
    pub method: Method,
    pub meta: SaliencyMeta,
}

impl SaliencyMap {
    fn new(values: Vec<f32>, c: usize, h: usize, w: usize, method: Method, meta: SaliencyMeta) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Divergence {
                step: 0,
                what: format!("{} saliency has negative or non-finite values", method.name()),
            });
        }
        Ok(SaliencyMap {
            values: Tensor::from_f32(vec![c, h, w], values)?,
            method,
            meta,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn as_slice(&self) -> &[f32] {
        self.values.as_f32().expect("saliency values are f32")
    }

    pub fn with_sample_id(mut self, id: impl Into<String>) -> Self {
        self.meta.sample_id = id.into();
        self
    }

    pub fn flagged(&self, flag: &str) -> bool {
        self.meta.flags.iter().any(|f| f == flag)
    }
}

pub const FLAG_EMPTY_FOREGROUND: &str = "empty_foreground";
pub const FLAG_SAMPLE_EXHAUSTED: &str = "sample_exhausted";
pub const FLAG_ZERO_CAM: &str = "zero_cam";
pub const FLAG_UNSTABLE: &str = "unstable";

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMask {
    /// `[1, H, W]` probabilities.
    pub probs: Tensor,
    /// `[1, H, W]`, 1 where `probs >= threshold`.
    pub binary: Tensor,
    pub threshold: f32,
}

impl PredictionMask {
    pub fn count(&self) -> usize {
        self.binary.to_f32_vec().iter().filter(|&&v| v > 0.0).count()
    }
}

fn probabilities(m: &Model, x: Fmap) -> Vec<f32> {
    m.logits_fmap(x).data.iter().map(|&z| sigmoid(z)).collect()
}

fn check_threshold(t: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("saliency threshold must lie in [0,1], got {t}")));
    }
    Ok(())
}

pub fn prediction_mask(m: &Model, x: &Tensor, threshold: f32) -> Result<PredictionMask> {
    check_threshold(threshold)?;
    let xf = m.input_fmap(x)?;
    let (h, w) = (xf.h, xf.w);
    let probs = probabilities(m, xf);
    let binary: Vec<u8> = probs.iter().map(|&p| u8::from(p >= threshold)).collect();
    Ok(PredictionMask {
        probs: Tensor::from_f32(vec![1, h, w], probs)?,
        binary: Tensor::from_u8(vec![1, h, w], binary)?,
        threshold,
    })
}

fn abs_gradient(m: &Model, xf: Fmap, weights: &[f32], method: Method, meta: SaliencyMeta) -> Result<SaliencyMap> {
    let (c, h, w) = (xf.c, xf.h, xf.w);
    let g = input_gradient(m, xf, weights);
    SaliencyMap::new(g.data.iter().map(|v| v.abs()).collect(), c, h, w, method, meta)
}

/// `|∂ Σ σ(logits) / ∂x|`.
pub fn saliency_full_output(m: &Model, x: &Tensor) -> Result<SaliencyMap> {
    let xf = m.input_fmap(x)?;
    let ones = vec![1.0f32; xf.h * xf.w];
    abs_gradient(m, xf, &ones, Method::FullOutput, SaliencyMeta::default())
}

/// `|∂ Σ mask ⊙ σ(logits) / ∂x|` where `mask = σ(logits) >= threshold`.
pub fn saliency_foreground(m: &Model, x: &Tensor, threshold: f32) -> Result<SaliencyMap> {
    check_threshold(threshold)?;
    let xf = m.input_fmap(x)?;
    let probs = probabilities(m, xf.clone());
    let weights: Vec<f32> = probs.iter().map(|&p| f32::from(u8::from(p >= threshold))).collect();
    let count = weights.iter().filter(|&&v| v > 0.0).count();
    let mut meta = SaliencyMeta {
        threshold: Some(threshold),
        mask_pixels: Some(count),
        ..Default::default()
    };
    if count == 0 {
        meta.flags.push(FLAG_EMPTY_FOREGROUND.into());
    }
    abs_gradient(m, xf, &weights, Method::Foreground, meta)
}

/// Gradient of `k` output points drawn without replacement from all pixels
/// or from the foreground mask at `threshold`.
pub fn saliency_sampled(
    m: &Model,
    x: &Tensor,
    k: usize,
    mode: SampleMode,
    threshold: f32,
    seed: u64,
) -> Result<SaliencyMap> {
    if k == 0 {
        return Err(Error::Config("sample count k must be at least 1".into()));
    }
    let xf = m.input_fmap(x)?;
    let n = xf.h * xf.w;
    let mut meta = SaliencyMeta {
        seed: Some(seed),
        k: Some(k),
        ..Default::default()
    };
    let (eligible, method): (Vec<usize>, Method) = match mode {
        SampleMode::Full => ((0..n).collect(), Method::FullOutput100),
        SampleMode::Foreground => {
            check_threshold(threshold)?;
            let probs = probabilities(m, xf.clone());
            let fg: Vec<usize> = (0..n).filter(|&i| probs[i] >= threshold).collect();
            meta.threshold = Some(threshold);
            meta.mask_pixels = Some(fg.len());
            if fg.is_empty() {
                return Err(Error::OutOfRange(
                    "foreground sampling needs at least one foreground pixel".into(),
                ));
            }
            (fg, Method::Foreground100)
        }
    };
    let chosen: Vec<usize> = if k >= eligible.len() {
        if k > eligible.len() {
            meta.flags.push(FLAG_SAMPLE_EXHAUSTED.into());
        }
        eligible
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, eligible.len(), k)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    };
    let mut weights = vec![0.0f32; n];
    for i in chosen {
        weights[i] = 1.0;
    }
    abs_gradient(m, xf, &weights, method, meta)
}

/// Per-channel, per-patch occlusion: the L1 change in probabilities when
/// channel `c`'s patch is replaced by the channel mean.
pub fn saliency_occlusion(m: &Model, x: &Tensor, patch: usize, exec: Exec) -> Result<SaliencyMap> {
    let xf = m.input_fmap(x)?;
    let (c, h, w) = (xf.c, xf.h, xf.w);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} input is not divisible into {patch}-pixel patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let base = probabilities(m, xf.clone());
    let means: Vec<f32> = (0..c).map(|ch| plane_mean(xf.plane(ch)) as f32).collect();
    let scores = exec.map_range(c * ph * pw, |job| {
        let (ch, py, px) = (job / (ph * pw), (job / pw) % ph, job % pw);
        let mut occ = xf.clone();
        let plane = occ.plane_mut(ch);
        for y in py * patch..(py + 1) * patch {
            plane[y * w + px * patch..y * w + (px + 1) * patch].fill(means[ch]);
        }
        let probs = probabilities(m, occ);
        base.iter().zip(&probs).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() as f32
    });
    let mut values = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                values[(ch * h + y) * w + xx] = scores[(ch * ph + y / patch) * pw + xx / patch];
            }
        }
    }
    let meta = SaliencyMeta {
        patch: Some(patch),
        ..Default::default()
    };
    SaliencyMap::new(values, c, h, w, Method::Occlusion, meta)
}

/// Filter weighting for class-activation maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamKind {
    /// Spatial mean of the activation gradient.
    GradCam,
    GradCamPp,
}

/// Half-pixel-centred bilinear resize of one plane.
fn bilinear_resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    if (sh, sw) == (dh, dw) {
        return src.to_vec();
    }
    let coord = |i: usize, s: usize, d: usize| -> (usize, usize, f32) {
        let f = ((i as f32 + 0.5) * s as f32 / d as f32 - 0.5).clamp(0.0, (s - 1) as f32);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, f - i0 as f32)
    };
    let mut out = vec![0.0f32; dh * dw];
    for y in 0..dh {
        let (y0, y1, ty) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, tx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn cam_from(a: &Fmap, da: &Fmap, kind: CamKind, out_h: usize, out_w: usize) -> Vec<f32> {
    let hw = a.h * a.w;
    let mut cam = vec![0.0f64; hw];
    for k in 0..a.c {
        let (ak, gk) = (a.plane(k), da.plane(k));
        let wk = match kind {
            CamKind::GradCam => gk.iter().map(|&g| g as f64).sum::<f64>() / hw as f64,
            CamKind::GradCamPp => {
                let sum_a: f64 = ak.iter().map(|&v| v as f64).sum();
                gk.iter()
                    .map(|&g| {
                        let g = g as f64;
                        let (g2, g3) = (g * g, g * g * g);
                        let den = 2.0 * g2 + sum_a * g3;
                        let alpha = if den != 0.0 { g2 / den } else { 0.0 };
                        alpha * g.max(0.0)
                    })
                    .sum()
            }
        };
        for (c, &v) in cam.iter_mut().zip(ak) {
            *c += wk * v as f64;
        }
    }
    let cam: Vec<f32> = cam.into_iter().map(|v| v.max(0.0) as f32).collect();
    let mut up = bilinear_resize(&cam, a.h, a.w, out_h, out_w);
    let max = up.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        up.iter_mut().for_each(|v| *v /= max);
    }
    up
}

fn cam_fmap(m: &Model, xf: Fmap, tap: usize, weights: &[f32], kind: CamKind) -> Vec<f32> {
    let (h, w) = (xf.h, xf.w);
    let (a, da) = tap_activation(m, xf, tap, weights);
    cam_from(&a, &da, kind, h, w)
}

fn resolve_layer(m: &Model, layer: Option<&str>) -> Result<(usize, String)> {
    let name = match layer {
        Some(l) => l.to_string(),
        None => format!("enc{}.conv2", m.levels()),
    };
    Ok((m.tap_index(&name)?, name))
}

/// GradCAM or GradCAM++ at `layer`, bilinearly upsampled and max-normalized.
/// Returns `[1, H, W]` in `[0, 1]`; all zeros when nothing activates.
pub fn gradcam(m: &Model, x: &Tensor, layer: &str, output_weights: &Tensor, kind: CamKind) -> Result<Tensor> {
    let xf = m.input_fmap(x)?;
    let (h, w) = (xf.h, xf.w);
    let ow = output_weights.to_f32_vec();
    if ow.len() != h * w {
        return Err(Error::Shape(format!(
            "output weights have {} values for a {h}x{w} output",
            ow.len()
        )));
    }
    let tap = m.tap_index(layer)?;
    Tensor::from_f32(vec![1, h, w], cam_fmap(m, xf, tap, &ow, kind))
}

pub fn gradcampp(m: &Model, x: &Tensor, layer: &str, output_weights: &Tensor) -> Result<Tensor> {
    gradcam(m, x, layer, output_weights, CamKind::GradCamPp)
}

/// Whole-channel occlusion combined with full-output GradCAM++.
pub fn gradcampp_channel_occluded(
    m: &Model,
    x: &Tensor,
    layer: Option<&str>,
    mode: CamMode,
    exec: Exec,
) -> Result<SaliencyMap> {
    let xf = m.input_fmap(x)?;
    let (c, h, w) = (xf.c, xf.h, xf.w);
    let (tap, name) = resolve_layer(m, layer)?;
    let ones = vec![1.0f32; h * w];
    let base = cam_fmap(m, xf.clone(), tap, &ones, CamKind::GradCamPp);
    let planes = exec.map_range(c, |ch| {
        let mut occ = xf.clone();
        let mean = plane_mean(occ.plane(ch)) as f32;
        occ.plane_mut(ch).fill(mean);
        let cam = cam_fmap(m, occ, tap, &ones, CamKind::GradCamPp);
        match mode {
            CamMode::Difference => base.iter().zip(&cam).map(|(a, b)| (a - b).abs()).collect(),
            CamMode::Occluded => cam,
        }
    });
    let mut meta = SaliencyMeta {
        layer: Some(name),
        cam_mode: Some(mode),
        flags: vec![FLAG_UNSTABLE.into()],
        ..Default::default()
    };
    if base.iter().all(|&v| v == 0.0) {
        meta.flags.push(FLAG_ZERO_CAM.into());
    }
    SaliencyMap::new(planes.concat(), c, h, w, Method::GradCamPpChannel, meta)
}

/// Run one method with `params`. The sampled methods use `params.seed` as is.
pub fn compute(m: &Model, x: &Tensor, method: Method, params: &SaliencyParams, exec: Exec) -> Result<SaliencyMap> {
    match method {
        Method::FullOutput => saliency_full_output(m, x),
        Method::Foreground => saliency_foreground(m, x, params.threshold),
        Method::FullOutput100 => saliency_sampled(m, x, params.k, SampleMode::Full, params.threshold, params.seed),
        Method::Foreground100 => {
            saliency_sampled(m, x, params.k, SampleMode::Foreground, params.threshold, params.seed)
        }
        Method::Occlusion => saliency_occlusion(m, x, params.patch, exec),
        Method::GradCamPpChannel => {
            if !params.unstable {
                return Err(Error::Config(
                    "gradcampp_channel is unstable; enable it explicitly with the unstable option".into(),
                ));
            }
            gradcampp_channel_occluded(m, x, params.layer.as_deref(), params.cam_mode, exec)
        }
    }
}

/// Seed for sample `index` derived from a run seed (SplitMix64 finalizer).
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One map per input, in input order. Foreground-sampled maps on images with
/// no foreground fall back to an all-zero map flagged `empty_foreground`.
pub fn compute_many(
    m: &Model,
    inputs: &[(String, &Tensor)],
    method: Method,
    params: &SaliencyParams,
    exec: Exec,
) -> Result<Vec<SaliencyMap>> {
    let jobs: Vec<usize> = (0..inputs.len()).collect();
    let inner = match exec {
        Exec::Parallel => Exec::Sequential,
        Exec::Sequential => Exec::Sequential,
    };
    exec.map(&jobs, |&i| {
        let (id, x) = &inputs[i];
        let p = SaliencyParams {
            seed: sample_seed(params.seed, i),
            ..params.clone()
        };
        let map = match compute(m, x, method, &p, inner) {
            Err(Error::OutOfRange(_)) if method == Method::Foreground100 => {
                let s = x.shape();
                let meta = SaliencyMeta {
                    seed: Some(p.seed),
                    k: Some(p.k),
                    threshold: Some(p.threshold),
                    mask_pixels: Some(0),
                    flags: vec![FLAG_EMPTY_FOREGROUND.into()],
                    ..Default::default()
                };
                SaliencyMap::new(vec![0.0; x.len()], s[0], s[1], s[2], method, meta)
            }
            other => other,
        }?;
        Ok(map.with_sample_id(id.clone()))
    })
    .into_iter()
    .collect()
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    method: Method,
    shape: Vec<usize>,
    #[serde(flatten)]
    meta: SaliencyMeta,
}

/// Write `<stem>.ntf` and `<stem>.json` into `dir`; returns the NTF path.
pub fn write_map(map: &SaliencyMap, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ntf = dir.join(format!("{stem}.ntf"));
    ntf_write(&map.values, &ntf)?;
    let side = Sidecar {
        method: map.method,
        shape: map.values.shape().to_vec(),
        meta: map.meta.clone(),
    };
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(ntf)
}

/// Read a map written by [`write_map`] given its NTF path.
pub fn read_map(ntf: &Path) -> Result<SaliencyMap> {
    let values = ntf_read(ntf)?;
    let json = ntf.with_extension("json");
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let side: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", json.display())))?;
    if side.shape != values.shape() || values.shape().len() != 3 {
        return Err(Error::Malformed(format!(
            "{}: sidecar shape {:?} disagrees with {:?}",
            json.display(),
            side.shape,
            values.shape()
        )));
    }
    Ok(SaliencyMap {
        values: Tensor::from_f32(values.shape().to_vec(), values.to_f32_vec())?,
        method: side.method,
        meta: side.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_model, grad_wrt_input, ConvParam, Layer, ModelConfig, ParamRole};
    use rand::Rng;

    fn input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_f32(vec![c, h, w], (0..c * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    /// `logit(y,x) = Σ_c w_c x_c(y,x) + b` as a single 1×1 convolution.
    fn pointwise(w: &[f32], b: f32) -> Model {
        let p = ConvParam {
            name: "head".into(),
            out_c: 1,
            in_c: w.len(),
            k: 1,
            weight: w.to_vec(),
            bias: vec![b],
            role: ParamRole::Head,
        };
        Model::from_parts(w.len(), 0, vec![Layer::Conv(0)], vec![p]).unwrap()
    }

    fn reverse_channels(x: &Tensor) -> Tensor {
        let s = x.shape();
        let hw = s[1] * s[2];
        let v = x.to_f32_vec();
        let out: Vec<f32> = (0..s[0]).rev().flat_map(|c| v[c * hw..(c + 1) * hw].to_vec()).collect();
        Tensor::from_f32(s.to_vec(), out).unwrap()
    }

    fn equal_slice_model(seed: u64) -> Model {
        let m = build_model(&ModelConfig {
            widths: vec![4, 8],
            seed,
            ..Default::default()
        })
        .unwrap();
        crate::surgery::apply_strategy(
            &m,
            &crate::surgery::InitStrategy::UniformChannel {
                channel: 0,
                base: crate::surgery::Base::Random,
            },
            seed,
            crate::surgery::ResamplePolicy::CenterCrop,
        )
        .unwrap()
    }

    #[test]
    fn full_output_matches_closed_form() {
        let w = [0.5f32, -1.25, 2.0];
        let m = pointwise(&w, 0.1);
        let x = input(3, 4, 4, 1);
        let s = saliency_full_output(&m, &x).unwrap();
        let xv = x.to_f32_vec();
        for c in 0..3 {
            for i in 0..16 {
                let z = (0..3).map(|k| w[k] as f64 * xv[k * 16 + i] as f64).sum::<f64>() + 0.1;
                let sg = 1.0 / (1.0 + (-z).exp());
                let want = (w[c] as f64 * sg * (1.0 - sg)).abs();
                assert!((s.as_slice()[c * 16 + i] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_first_conv_gives_zero_saliency() {
        let m = pointwise(&[0.0, 0.0, 0.0], 0.3);
        let x = input(3, 4, 4, 2);
        for method in [Method::FullOutput, Method::Occlusion] {
            let p = SaliencyParams { patch: 2, ..Default::default() };
            let s = compute(&m, &x, method, &p, Exec::Sequential).unwrap();
            assert!(s.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn equal_channels_give_equal_planes() {
        let m = equal_slice_model(4);
        let plane = input(1, 8, 8, 3).to_f32_vec();
        let x = Tensor::from_f32(vec![3, 8, 8], [plane.clone(), plane.clone(), plane].concat()).unwrap();
        let params = SaliencyParams { patch: 4, threshold: 0.3, unstable: true, ..Default::default() };
        for method in [Method::FullOutput, Method::Foreground, Method::Occlusion, Method::GradCamPpChannel] {
            let s = compute(&m, &x, method, &params, Exec::Sequential).unwrap();
            let v = s.as_slice();
            assert_eq!(&v[..64], &v[64..128], "{method:?}");
            assert_eq!(&v[..64], &v[128..], "{method:?}");
        }
    }

    #[test]
    fn foreground_limits() {
        let m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let x = input(3, 8, 8, 5);
        let full = saliency_full_output(&m, &x).unwrap();
        let zero = saliency_foreground(&m, &x, 0.0).unwrap();
        assert_eq!(zero.values, full.values);
        let none = saliency_foreground(&m, &x, 1.0).unwrap();
        assert!(none.flagged(FLAG_EMPTY_FOREGROUND));
        assert!(none.as_slice().iter().all(|&v| v == 0.0));
        assert!(saliency_foreground(&m, &x, 1.5).is_err());
    }

    #[test]
    fn single_pixel_foreground_equals_single_sample() {
        let m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let x = input(3, 8, 8, 6);
        let mask = prediction_mask(&m, &x, 0.0).unwrap();
        let probs = mask.probs.to_f32_vec();
        let top = probs.iter().copied().fold(f32::MIN, f32::max);
        let fg = saliency_foreground(&m, &x, top).unwrap();
        assert_eq!(fg.meta.mask_pixels, Some(1));
        let one = saliency_sampled(&m, &x, 1, SampleMode::Foreground, top, 9).unwrap();
        assert_eq!(fg.values, one.values);
    }

    #[test]
    fn sampled_properties() {
        let m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let x = input(3, 8, 8, 7);
        let all = saliency_sampled(&m, &x, 64, SampleMode::Full, 0.5, 1).unwrap();
        assert_eq!(all.values, saliency_full_output(&m, &x).unwrap().values);
        let more = saliency_sampled(&m, &x, 100, SampleMode::Full, 0.5, 1).unwrap();
        assert!(more.flagged(FLAG_SAMPLE_EXHAUSTED));
        let a = saliency_sampled(&m, &x, 10, SampleMode::Full, 0.5, 3).unwrap();
        let b = saliency_sampled(&m, &x, 10, SampleMode::Full, 0.5, 3).unwrap();
        assert_eq!(a, b);
        assert!(saliency_sampled(&m, &x, 5, SampleMode::Foreground, 1.0, 0).is_err());
    }

    #[test]
    fn gradient_partition_sums_to_full() {
        let m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let x = input(3, 8, 8, 8);
        let full = grad_wrt_input(&m, &x, &Tensor::from_f32(vec![1, 8, 8], vec![1.0; 64]).unwrap()).unwrap();
        let mut sum = vec![0.0f64; full.len()];
        for part in 0..4 {
            let w: Vec<f32> = (0..64).map(|i| f32::from(u8::from(i % 4 == part))).collect();
            let g = grad_wrt_input(&m, &x, &Tensor::from_f32(vec![1, 8, 8], w).unwrap()).unwrap();
            for (s, v) in sum.iter_mut().zip(g.to_f32_vec()) {
                *s += v as f64;
            }
        }
        for (s, f) in sum.iter().zip(full.to_f32_vec()) {
            assert!((s - f as f64).abs() < 1e-5 * (1.0 + f.abs() as f64));
        }
    }

    #[test]
    fn occlusion_grid() {
        let m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let x = input(3, 32, 32, 9);
        let s = saliency_occlusion(&m, &x, 16, Exec::Sequential).unwrap();
        let v = s.as_slice();
        let mut distinct = std::collections::BTreeSet::new();
        for c in 0..3 {
            for y in 0..32 {
                for xx in 0..32 {
                    let cell = v[(c * 32 + (y / 16) * 16) * 32 + (xx / 16) * 16];
                    assert_eq!(v[(c * 32 + y) * 32 + xx], cell);
                }
            }
            for p in 0..4 {
                distinct.insert(v[(c * 32 + (p / 2) * 16) * 32 + (p % 2) * 16].to_bits());
            }
        }
        assert_eq!(distinct.len(), 12);
        assert_eq!(saliency_occlusion(&m, &x, 16, Exec::Parallel).unwrap(), s);
        assert!(saliency_occlusion(&m, &x, 5, Exec::Sequential).is_err());
    }

    #[test]
    fn constant_channel_occlusion_is_noop() {
        let m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let mut v = input(3, 8, 8, 10).to_f32_vec();
        v[64..128].fill(0.4);
        let x = Tensor::from_f32(vec![3, 8, 8], v).unwrap();
        let s = saliency_occlusion(&m, &x, 4, Exec::Sequential).unwrap();
        assert!(s.as_slice()[64..128].iter().all(|&v| v == 0.0));
        let g = gradcampp_channel_occluded(&m, &x, None, CamMode::Difference, Exec::Sequential).unwrap();
        assert!(g.as_slice()[64..128].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ignored_channel_has_zero_cam_plane() {
        let mut m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let p = m.first_conv_mut();
        for o in 0..p.out_c {
            let base = (o * p.in_c + 2) * 9;
            p.weight[base..base + 9].fill(0.0);
        }
        let x = input(3, 8, 8, 11);
        let g = gradcampp_channel_occluded(&m, &x, Some("enc1.conv2"), CamMode::Difference, Exec::Sequential).unwrap();
        assert!(g.as_slice()[128..].iter().all(|&v| v == 0.0));
        assert!(g.flagged(FLAG_UNSTABLE));
    }

    #[test]
    fn unstable_method_requires_opt_in() {
        let m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let x = input(3, 8, 8, 12);
        let r = compute(&m, &x, Method::GradCamPpChannel, &SaliencyParams::default(), Exec::Sequential);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn single_filter_cam_is_relu_activation() {
        // one filter, positive dA everywhere: alpha·relu(dA) sums to a
        // positive weight, so the map is relu(A) up to scale
        let a = Fmap::from_vec(1, 2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        let da = Fmap::from_vec(1, 2, 2, vec![0.2, 0.4, 0.1, 0.3]);
        let cam = cam_from(&a, &da, CamKind::GradCamPp, 2, 2);
        assert_eq!(cam, vec![1.0 / 3.0, 0.0, 1.0, 0.5 / 3.0]);
    }

    #[test]
    fn constant_gradient_cam_argmax_agrees() {
        let a = Fmap::from_vec(2, 2, 2, vec![1.0, 4.0, 2.0, 0.0, 3.0, 0.5, 1.0, 2.0]);
        let da = Fmap::from_vec(2, 2, 2, vec![0.5, 0.5, 0.5, 0.5, 0.2, 0.2, 0.2, 0.2]);
        let argmax = |v: &[f32]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let pp = cam_from(&a, &da, CamKind::GradCamPp, 2, 2);
        let g = cam_from(&a, &da, CamKind::GradCam, 2, 2);
        assert_eq!(argmax(&pp), argmax(&g));
    }

    #[test]
    fn zero_output_weights_zero_cam() {
        let m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let x = input(3, 8, 8, 13);
        let zeros = Tensor::from_f32(vec![1, 8, 8], vec![0.0; 64]).unwrap();
        let cam = gradcampp(&m, &x, "enc2.conv2", &zeros).unwrap();
        assert!(cam.to_f32_vec().iter().all(|&v| v == 0.0));
        let ones = Tensor::from_f32(vec![1, 8, 8], vec![1.0; 64]).unwrap();
        let cam = gradcampp(&m, &x, "enc2.conv2", &ones).unwrap();
        let v = cam.to_f32_vec();
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(gradcampp(&m, &x, "nope", &ones).is_err());
    }

    #[test]
    fn reversal_symmetry_for_every_method() {
        let m = equal_slice_model(21);
        let x = input(3, 16, 16, 14);
        let xr = reverse_channels(&x);
        let params = SaliencyParams { patch: 8, threshold: 0.3, k: 20, unstable: true, ..Default::default() };
        for method in Method::ALL {
            let a = compute(&m, &x, method, &params, Exec::Sequential).unwrap();
            let b = compute(&m, &xr, method, &params, Exec::Sequential).unwrap();
            assert_eq!(reverse_channels(&a.values), b.values, "{method:?}");
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let x = input(3, 8, 8, 15);
        let s = saliency_sampled(&m, &x, 5, SampleMode::Full, 0.85, 4).unwrap().with_sample_id("sample-00003");
        let dir = tempfile::tempdir().unwrap();
        let p = write_map(&s, dir.path(), "s3").unwrap();
        assert_eq!(read_map(&p).unwrap(), s);
        let text = fs::read_to_string(dir.path().join("s3.json")).unwrap();
        assert!(text.contains("\"method\": \"full_output100\""));
        assert!(text.contains("\"seed\": 4"));
    }

    #[test]
    fn many_is_order_stable() {
        let m = build_model(&ModelConfig { widths: vec![4, 8], ..Default::default() }).unwrap();
        let xs: Vec<Tensor> = (0..4).map(|i| input(3, 8, 8, 30 + i)).collect();
        let inputs: Vec<(String, &Tensor)> = xs.iter().enumerate().map(|(i, x)| (format!("s{i}"), x)).collect();
        let p = SaliencyParams { k: 7, ..Default::default() };
        let a = compute_many(&m, &inputs, Method::FullOutput100, &p, Exec::Sequential).unwrap();
        let b = compute_many(&m, &inputs, Method::FullOutput100, &p, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[2].meta.sample_id, "s2");
        assert_ne!(a[0].meta.seed, a[1].meta.seed);
    }
}
