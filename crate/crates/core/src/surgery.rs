//! First-layer weight surgery: the initialization strategies that decide how
//! much a model prefers one stacked slice over another before training.
//!
//! Channel names follow RGB order: 0 = red (first slice), 1 = green (middle
//! of a 3-stack), 2 = blue (last slice).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::checkpoint::{is_checkpoint_dir, load_checkpoint, read_kernel};
use crate::net::Model;
use crate::tensor::{ntf_read, Tensor};

/// Where pretrained first-layer weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSource {
    /// A kernel `.ntf`, a checkpoint directory, or an exporter manifest `.json`.
    Path(PathBuf),
    /// An in-memory `[out, in, k, k]` kernel.
    Kernel(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Base {
    /// The model's own seeded random first-layer weights.
    Random,
    Source(KernelSource),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitStrategy {
    Random,
    Pretrained(KernelSource),
    /// Copy one source channel's slice to every input channel.
    UniformChannel { channel: usize, base: Base },
    /// Replace every input channel's slice with the mean over source channels.
    AverageChannels { base: Base },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplePolicy {
    #[default]
    CenterCrop,
    Bilinear,
}

impl ResamplePolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "center_crop" => Some(ResamplePolicy::CenterCrop),
            "bilinear" => Some(ResamplePolicy::Bilinear),
            _ => None,
        }
    }
}

/// Parse `red`/`green`/`blue` or a numeric channel index.
pub fn parse_channel(name: &str) -> Result<usize> {
    match name {
        "red" | "r" => Ok(0),
        "green" | "g" => Ok(1),
        "blue" | "b" => Ok(2),
        other => other
            .parse()
            .map_err(|_| Error::Config(format!("unknown channel name {other:?}"))),
    }
}

pub fn channel_label(c: usize) -> String {
    match c {
        0 => "red".into(),
        1 => "green".into(),
        2 => "blue".into(),
        c => c.to_string(),
    }
}

impl InitStrategy {
    /// Parse `random`, `pretrained`, `uniform-<channel>` or `average`.
    /// `source` supplies pretrained weights; without it Uniform/Average
    /// operate on the model's random weights.
    pub fn parse(name: &str, source: Option<&Path>) -> Result<Self> {
        let base = || match source {
            Some(p) => Base::Source(KernelSource::Path(p.to_path_buf())),
            None => Base::Random,
        };
        match name {
            "random" => Ok(InitStrategy::Random),
            "pretrained" => source
                .map(|p| InitStrategy::Pretrained(KernelSource::Path(p.to_path_buf())))
                .ok_or_else(|| Error::Config("strategy pretrained needs a source path".into())),
            "average" => Ok(InitStrategy::AverageChannels { base: base() }),
            other => match other.strip_prefix("uniform-") {
                Some(ch) => Ok(InitStrategy::UniformChannel {
                    channel: parse_channel(ch)?,
                    base: base(),
                }),
                None => Err(Error::Config(format!("unknown init strategy {other:?}"))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            InitStrategy::Random => "random".into(),
            InitStrategy::Pretrained(_) => "pretrained".into(),
            InitStrategy::UniformChannel { channel, .. } => {
                format!("uniform-{}", channel_label(*channel))
            }
            InitStrategy::AverageChannels { .. } => "average".into(),
        }
    }
}

fn check_kernel(k: &Tensor) -> Result<[usize; 4]> {
    match *k.shape() {
        [o, n, a, b] if a == b => Ok([o, n, a, b]),
        ref s => Err(Error::Shape(format!("kernel must be [out,in,k,k], got {s:?}"))),
    }
}

/// Every channel slice becomes a copy of slice `c`.
pub fn uniformize_channel(kernel: &Tensor, c: usize) -> Result<Tensor> {
    let [out, n, k, _] = check_kernel(kernel)?;
    if c >= n {
        return Err(Error::OutOfRange(format!("channel {c} of a {n}-channel kernel")));
    }
    let src = kernel.to_f32_vec();
    let kk = k * k;
    let mut dst = vec![0.0f32; src.len()];
    for o in 0..out {
        let slice = &src[(o * n + c) * kk..(o * n + c + 1) * kk];
        for i in 0..n {
            dst[(o * n + i) * kk..(o * n + i + 1) * kk].copy_from_slice(slice);
        }
    }
    Tensor::from_f32(kernel.shape().to_vec(), dst)
}

/// Every channel slice becomes the arithmetic mean of all slices.
pub fn average_channels(kernel: &Tensor) -> Result<Tensor> {
    let [out, n, k, _] = check_kernel(kernel)?;
    let src = kernel.to_f32_vec();
    let kk = k * k;
    let mut dst = vec![0.0f32; src.len()];
    for o in 0..out {
        for t in 0..kk {
            let mean = (0..n).map(|i| src[(o * n + i) * kk + t] as f64).sum::<f64>() / n as f64;
            for i in 0..n {
                dst[(o * n + i) * kk + t] = mean as f32;
            }
        }
    }
    Tensor::from_f32(kernel.shape().to_vec(), dst)
}

fn resample(src: &[f32], ks: usize, kd: usize, policy: ResamplePolicy) -> Vec<f32> {
    if ks == kd {
        return src.to_vec();
    }
    match policy {
        ResamplePolicy::CenterCrop => {
            let mut out = vec![0.0f32; kd * kd];
            // offset of the destination window inside the source (may be negative when padding)
            let off = (ks as isize - kd as isize) / 2;
            for y in 0..kd {
                for x in 0..kd {
                    let (sy, sx) = (y as isize + off, x as isize + off);
                    if sy >= 0 && sx >= 0 && (sy as usize) < ks && (sx as usize) < ks {
                        out[y * kd + x] = src[sy as usize * ks + sx as usize];
                    }
                }
            }
            out
        }
        ResamplePolicy::Bilinear => {
            let pos = |i: usize| -> f64 {
                if kd == 1 {
                    (ks as f64 - 1.0) / 2.0
                } else {
                    i as f64 * (ks as f64 - 1.0) / (kd as f64 - 1.0)
                }
            };
            let at = |y: usize, x: usize| src[y * ks + x] as f64;
            let mut out = vec![0.0f32; kd * kd];
            for y in 0..kd {
                let fy = pos(y);
                let y0 = (fy.floor() as usize).min(ks - 1);
                let y1 = (y0 + 1).min(ks - 1);
                let ty = fy - y0 as f64;
                for x in 0..kd {
                    let fx = pos(x);
                    let x0 = (fx.floor() as usize).min(ks - 1);
                    let x1 = (x0 + 1).min(ks - 1);
                    let tx = fx - x0 as f64;
                    let v = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
                        + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
                    out[y * kd + x] = v as f32;
                }
            }
            out
        }
    }
}

/// Fit `src` to `dst_shape = [out, N, k, k]`: keep the first `out` filters and
/// resample each spatial slice. Input channel counts must already agree.
pub fn adapt_kernel(src: &Tensor, dst_shape: [usize; 4], policy: ResamplePolicy) -> Result<Tensor> {
    let [out_s, n_s, ks, _] = check_kernel(src)?;
    let [out, n, kd, kd2] = dst_shape;
    if kd != kd2 {
        return Err(Error::Shape(format!("destination kernel {dst_shape:?} is not square")));
    }
    if out > out_s {
        return Err(Error::Shape(format!(
            "source has {out_s} filters, destination needs {out}"
        )));
    }
    if n != n_s {
        return Err(Error::Shape(format!(
            "source has {n_s} input channels, destination needs {n}"
        )));
    }
    let values = src.to_f32_vec();
    let kk = ks * ks;
    let mut dst = Vec::with_capacity(out * n * kd * kd);
    for o in 0..out {
        for i in 0..n {
            let slice = &values[(o * n_s + i) * kk..(o * n_s + i + 1) * kk];
            dst.extend(resample(slice, ks, kd, policy));
        }
    }
    Tensor::from_f32(dst_shape.to_vec(), dst)
}

/// Manifest written by the checkpoint exporter next to its NTF files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub source: String,
    #[serde(default)]
    pub tool_version: String,
    pub tensors: Vec<ExportedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Relative to the manifest's directory.
    pub path: String,
    #[serde(default)]
    pub sha256: Option<String>,
}

/// First 4-D tensor listed in an exporter manifest, or the one called `name`.
pub fn kernel_from_export(manifest: &Path, name: Option<&str>) -> Result<Tensor> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: ExportManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Malformed(format!("{}: {e}", manifest.display())))?;
    let entry = m
        .tensors
        .iter()
        .find(|t| name.map_or(t.shape.len() == 4, |n| t.name == n))
        .ok_or_else(|| {
            let names: Vec<&str> = m.tensors.iter().map(|t| t.name.as_str()).collect();
            Error::Config(format!(
                "{}: no matching kernel; available tensors {names:?}",
                manifest.display()
            ))
        })?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let t = ntf_read(dir.join(&entry.path))?;
    if t.shape() != entry.shape.as_slice() {
        return Err(Error::Malformed(format!(
            "{}: manifest shape {:?} disagrees with file shape {:?}",
            entry.name,
            entry.shape,
            t.shape()
        )));
    }
    check_kernel(&t)?;
    Ok(t)
}

/// Loaded pretrained weights: a first-conv kernel, its bias if known, and a
/// full model when the source was a checkpoint.
struct Loaded {
    kernel: Tensor,
    bias: Option<Vec<f32>>,
    model: Option<Model>,
}

fn load_source(src: &KernelSource) -> Result<Loaded> {
    match src {
        KernelSource::Kernel(t) => {
            check_kernel(t)?;
            Ok(Loaded {
                kernel: t.clone(),
                bias: None,
                model: None,
            })
        }
        KernelSource::Path(p) if is_checkpoint_dir(p) => {
            let m = load_checkpoint(p)?;
            let first = m.first_conv();
            Ok(Loaded {
                kernel: first.weight_tensor(),
                bias: Some(first.bias.clone()),
                model: Some(m),
            })
        }
        KernelSource::Path(p) if p.extension().is_some_and(|e| e == "json") => Ok(Loaded {
            kernel: kernel_from_export(p, None)?,
            bias: None,
            model: None,
        }),
        KernelSource::Path(p) => Ok(Loaded {
            kernel: read_kernel(p)?,
            bias: None,
            model: None,
        }),
    }
}

/// Copy every non-first parameter whose name and shape match.
fn copy_matching(dst: &mut Model, src: &Model) {
    let first = dst.first_conv().name.clone();
    for p in dst.params_mut() {
        if p.name == first {
            continue;
        }
        if let Some(q) = src.param(&p.name) {
            if (q.out_c, q.in_c, q.k) == (p.out_c, p.in_c, p.k) {
                p.weight.clone_from(&q.weight);
                p.bias.clone_from(&q.bias);
            }
        }
    }
}

fn install_first(m: &mut Model, kernel: Tensor, bias: Option<Vec<f32>>) -> Result<()> {
    let first = m.first_conv_mut();
    let want = [first.out_c, first.in_c, first.k, first.k];
    if kernel.shape() != want {
        return Err(Error::Shape(format!(
            "adapted kernel {:?} does not fit {want:?}",
            kernel.shape()
        )));
    }
    first.weight = kernel.to_f32_vec();
    if let Some(b) = bias {
        first.bias = b.into_iter().take(first.out_c).collect();
    }
    Ok(())
}

/// Collapse a source kernel onto `n` identical channel slices.
fn collapse(kernel: &Tensor, n: usize, pick: Option<usize>) -> Result<Tensor> {
    let [out, n_s, k, _] = check_kernel(kernel)?;
    let single = match pick {
        Some(c) => uniformize_channel(kernel, c)?,
        None => average_channels(kernel)?,
    };
    // every slice is now identical; replicate slice 0 to `n` channels
    let v = single.to_f32_vec();
    let kk = k * k;
    let mut out_v = Vec::with_capacity(out * n * kk);
    for o in 0..out {
        let s = &v[o * n_s * kk..o * n_s * kk + kk];
        for _ in 0..n {
            out_v.extend_from_slice(s);
        }
    }
    Tensor::from_f32(vec![out, n, k, k], out_v)
}

/// A copy of `m` with every parameter re-drawn from `seed`, then its first
/// convolution initialized according to `s`.
pub fn apply_strategy(
    m: &Model,
    s: &InitStrategy,
    seed: u64,
    policy: ResamplePolicy,
) -> Result<Model> {
    let mut out = m.clone();
    out.reinit(seed);
    let first = out.first_conv();
    let dst = [first.out_c, first.in_c, first.k, first.k];
    let (pick, base) = match s {
        InitStrategy::Random => return Ok(out),
        InitStrategy::Pretrained(src) => {
            let loaded = load_source(src)?;
            if let Some(full) = &loaded.model {
                copy_matching(&mut out, full);
            }
            let k = adapt_kernel(&loaded.kernel, dst, policy)?;
            install_first(&mut out, k, loaded.bias)?;
            return Ok(out);
        }
        InitStrategy::UniformChannel { channel, base } => (Some(*channel), base),
        InitStrategy::AverageChannels { base } => (None, base),
    };
    let (kernel, bias) = match base {
        Base::Random => (out.first_conv().weight_tensor(), None),
        Base::Source(src) => {
            let loaded = load_source(src)?;
            if let Some(full) = &loaded.model {
                copy_matching(&mut out, full);
            }
            (loaded.kernel, loaded.bias)
        }
    };
    let n_s = check_kernel(&kernel)?[1];
    if let Some(c) = pick {
        if c >= n_s {
            return Err(Error::OutOfRange(format!(
                "channel {c} of a {n_s}-channel source kernel"
            )));
        }
    }
    let collapsed = collapse(&kernel, dst[1], pick)?;
    let k = adapt_kernel(&collapsed, dst, policy)?;
    install_first(&mut out, k, bias)?;
    Ok(out)
}

/// Rewrite only the first convolution of `m` according to `s`; every other
/// parameter is kept. The first-conv bias is replaced only when
/// `replace_bias` is set and the strategy supplies one. `Random` re-draws
/// the whole model from `seed`.
pub fn edit_first_conv(
    m: &Model,
    s: &InitStrategy,
    seed: u64,
    policy: ResamplePolicy,
    replace_bias: bool,
) -> Result<Model> {
    let fresh = apply_strategy(m, s, seed, policy)?;
    if matches!(s, InitStrategy::Random) {
        return Ok(fresh);
    }
    let first = fresh.first_conv().clone();
    let mut out = m.clone();
    let dst = out.first_conv_mut();
    dst.weight = first.weight;
    if replace_bias {
        dst.bias = first.bias;
    }
    Ok(out)
}

/// `true` when every input-channel slice of the first convolution is identical.
pub fn first_conv_channels_equal(m: &Model) -> bool {
    let p = m.first_conv();
    let kk = p.k * p.k;
    (0..p.out_c).all(|o| {
        let s0 = &p.weight[o * p.in_c * kk..o * p.in_c * kk + kk];
        (1..p.in_c).all(|i| &p.weight[(o * p.in_c + i) * kk..(o * p.in_c + i + 1) * kk] == s0)
    })
}

/// Scale each input-channel slice of a kernel by its own factor.
pub fn scale_channels(kernel: &Tensor, factors: &[f32]) -> Result<Tensor> {
    let [out, n, k, _] = check_kernel(kernel)?;
    if factors.len() != n {
        return Err(Error::Shape(format!("{} factors for {n} channels", factors.len())));
    }
    let mut v = kernel.to_f32_vec();
    let kk = k * k;
    for o in 0..out {
        for (i, f) in factors.iter().enumerate() {
            v[(o * n + i) * kk..(o * n + i + 1) * kk].iter_mut().for_each(|x| *x *= f);
        }
    }
    Tensor::from_f32(kernel.shape().to_vec(), v)
}
