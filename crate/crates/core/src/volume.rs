//! Slice volumes, 2D+ stacking and the synthetic volume generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ntf_read, ntf_write, Tensor};

/// A grayscale slice stack `[Z, H, W]` with values in `[0, 1]` and an optional
/// label volume of the same extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    image: Tensor,
    mask: Option<Tensor>,
}

impl Volume {
    pub fn new(image: Tensor, mask: Option<Tensor>) -> Result<Self> {
        if image.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "volume image must be [Z,H,W], got {:?}",
                image.shape()
            )));
        }
        let image = Tensor::from_f32(image.shape().to_vec(), image.to_f32_vec())?;
        let values = image.as_f32().expect("f32");
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Malformed("volume image values must lie in [0,1]".into()));
        }
        let mask = match mask {
            None => None,
            Some(m) => {
                if m.shape() != image.shape() {
                    return Err(Error::Shape(format!(
                        "mask shape {:?} differs from image shape {:?}",
                        m.shape(),
                        image.shape()
                    )));
                }
                let labels = m
                    .to_f64_vec()
                    .into_iter()
                    .map(|v| {
                        if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                            Ok(v as u8)
                        } else {
                            Err(Error::Malformed(format!("mask label {v} is not a class index")))
                        }
                    })
                    .collect::<Result<Vec<u8>>>()?;
                Some(Tensor::from_u8(m.shape().to_vec(), labels)?)
            }
        };
        Ok(Volume { image, mask })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    pub fn depth(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.height() * self.width();
        &self.image.as_f32().expect("f32 image")[z * plane..(z + 1) * plane]
    }

    fn mask_slice(&self, z: usize) -> Option<&[u8]> {
        let plane = self.height() * self.width();
        self.mask.as_ref().map(|m| match m.data() {
            crate::tensor::TensorData::U8(v) => &v[z * plane..(z + 1) * plane],
            _ => unreachable!("masks are stored as u8"),
        })
    }

    /// The same volume with slice order reversed.
    pub fn reversed(&self) -> Volume {
        let (z, plane) = (self.depth(), self.height() * self.width());
        let img = self.image.as_f32().expect("f32");
        let mut out = Vec::with_capacity(img.len());
        for k in (0..z).rev() {
            out.extend_from_slice(&img[k * plane..(k + 1) * plane]);
        }
        let mask = self.mask.as_ref().map(|_| {
            let mut m = Vec::with_capacity(img.len());
            for k in (0..z).rev() {
                m.extend_from_slice(self.mask_slice(k).expect("mask"));
            }
            Tensor::from_u8(self.image.shape().to_vec(), m).expect("shape")
        });
        Volume {
            image: Tensor::from_f32(self.image.shape().to_vec(), out).expect("shape"),
            mask,
        }
    }
}

/// Where a volume (or its mask) comes from.
#[derive(Debug, Clone)]
pub enum VolumeSource {
    /// Ordered binary PGM slices.
    Pgm(Vec<PathBuf>),
    /// A single `[Z,H,W]` NTF tensor.
    Ntf(PathBuf),
}

struct Pgm {
    width: usize,
    height: usize,
    maxval: u32,
    values: Vec<u32>,
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let bad = |what: &str| Error::Malformed(format!("{}: {what}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 header"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a number in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("header must end with a single whitespace byte"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval must be in 1..=65535"));
    }
    let (width, height) = (width as usize, height as usize);
    let count = width * height;
    let data = &bytes[pos..];
    let values: Vec<u32> = if maxval < 256 {
        if data.len() < count {
            return Err(bad("truncated pixel data"));
        }
        data[..count].iter().map(|&b| b as u32).collect()
    } else {
        if data.len() < 2 * count {
            return Err(bad("truncated pixel data"));
        }
        data[..2 * count]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    };
    if values.iter().any(|&v| v > maxval) {
        return Err(bad("pixel value exceeds maxval"));
    }
    Ok(Pgm {
        width,
        height,
        maxval,
        values,
    })
}

/// Encode a binary PGM. Values are written verbatim; `maxval` selects 8 or 16 bit.
pub fn encode_pgm(width: usize, height: usize, maxval: u16, values: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval < 256 {
        out.extend(values.iter().map(|&v| v as u8));
    } else {
        values.iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes()));
    }
    out
}

fn read_pgm_stack(paths: &[PathBuf], normalize: bool) -> Result<Tensor> {
    if paths.is_empty() {
        return Err(Error::Malformed("empty slice list".into()));
    }
    let mut dims: Option<(usize, usize)> = None;
    let mut out = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let pgm = parse_pgm(&bytes, path)?;
        match dims {
            None => dims = Some((pgm.height, pgm.width)),
            Some(d) if d != (pgm.height, pgm.width) => {
                return Err(Error::Shape(format!(
                    "slice {} is {}x{}, expected {}x{}",
                    path.display(),
                    pgm.height,
                    pgm.width,
                    d.0,
                    d.1
                )))
            }
            Some(_) => {}
        }
        let scale = if normalize { pgm.maxval as f32 } else { 1.0 };
        out.extend(pgm.values.iter().map(|&v| v as f32 / scale));
    }
    let (h, w) = dims.expect("at least one slice");
    Tensor::from_f32(vec![paths.len(), h, w], out)
}

fn read_source(src: &VolumeSource, normalize: bool) -> Result<Tensor> {
    match src {
        VolumeSource::Pgm(paths) => read_pgm_stack(paths, normalize),
        VolumeSource::Ntf(path) => {
            let t = ntf_read(path)?;
            if t.shape().len() != 3 {
                return Err(Error::Shape(format!(
                    "{}: volume must be [Z,H,W], got {:?}",
                    path.display(),
                    t.shape()
                )));
            }
            Ok(t)
        }
    }
}

/// Load an image volume and optional mask. PGM pixels are divided by the
/// file's maxval; NTF images must already be in `[0,1]`.
pub fn load_volume(image: &VolumeSource, mask: Option<&VolumeSource>) -> Result<Volume> {
    let image = read_source(image, true)?;
    let mask = mask.map(|m| read_source(m, false)).transpose()?;
    if let Some(m) = &mask {
        if m.shape()[0] != image.shape()[0] {
            return Err(Error::Shape(format!(
                "mask has {} slices, image has {}",
                m.shape()[0],
                image.shape()[0]
            )));
        }
    }
    Volume::new(image, mask)
}

/// All files in `dir` with the given extension, lexicographically ordered.
pub fn list_slices(dir: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == extension))
        .collect();
    paths.sort();
    Ok(paths)
}

/// An odd stack of adjacent slices centred on `center_index`, plus the
/// binarized mask of the centre slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample2DPlus {
    pub input: Tensor,
    pub center_mask: Tensor,
    pub center_index: usize,
}

impl Sample2DPlus {
    pub fn channels(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.input.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.input.shape()[2]
    }

    pub fn input_f32(&self) -> &[f32] {
        self.input.as_f32().expect("sample inputs are f32")
    }

    pub fn mask_u8(&self) -> &[u8] {
        match self.center_mask.data() {
            crate::tensor::TensorData::U8(v) => v,
            _ => unreachable!("masks are u8"),
        }
    }
}

/// Stack slices `z - half_window ..= z + half_window` into channels. Edge
/// slices without a full window are rejected rather than padded.
pub fn stack_2dplus(v: &Volume, z: usize, half_window: usize, class: u8) -> Result<Sample2DPlus> {
    if half_window == 0 {
        return Err(Error::Config("half_window must be positive".into()));
    }
    let depth = v.depth();
    if z < half_window || z + half_window >= depth {
        return Err(Error::OutOfRange(format!(
            "slice {z} has no full ±{half_window} window in a volume of {depth} slices"
        )));
    }
    let mask = v
        .mask_slice(z)
        .ok_or_else(|| Error::Malformed("volume has no mask".into()))?;
    let n = 2 * half_window + 1;
    let (h, w) = (v.height(), v.width());
    let mut input = Vec::with_capacity(n * h * w);
    for k in z - half_window..=z + half_window {
        input.extend_from_slice(v.slice(k));
    }
    let center_mask = mask.iter().map(|&l| u8::from(l == class)).collect();
    Ok(Sample2DPlus {
        input: Tensor::from_f32(vec![n, h, w], input)?,
        center_mask: Tensor::from_u8(vec![h, w], center_mask)?,
        center_index: z,
    })
}

/// Every interior sample of the volume, in slice order.
pub fn stack_all(v: &Volume, half_window: usize, class: u8) -> Result<Vec<Sample2DPlus>> {
    let depth = v.depth();
    if depth < 2 * half_window + 1 {
        return Err(Error::OutOfRange(format!(
            "volume of {depth} slices is too thin for half_window {half_window}"
        )));
    }
    (half_window..depth - half_window)
        .map(|z| stack_2dplus(v, z, half_window, class))
        .collect()
}

pub fn write_samples(dir: &Path, samples: &[Sample2DPlus]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for s in samples {
        let stem = format!("sample-{:05}", s.center_index);
        let x = dir.join(format!("{stem}.x.ntf"));
        ntf_write(&s.input, &x)?;
        ntf_write(&s.center_mask, dir.join(format!("{stem}.y.ntf")))?;
        written.push(x);
    }
    Ok(written)
}

pub fn read_samples(dir: &Path) -> Result<Vec<Sample2DPlus>> {
    let mut xs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".x.ntf"))
        .collect();
    xs.sort();
    xs.into_iter()
        .map(|x| {
            let name = x.file_name().unwrap().to_string_lossy().to_string();
            let stem = name.trim_end_matches(".x.ntf");
            let center_index = stem
                .rsplit('-')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Malformed(format!("bad sample name {name}")))?;
            let input = ntf_read(&x)?;
            let mask = ntf_read(x.with_file_name(format!("{stem}.y.ntf")))?;
            let input = Tensor::from_f32(input.shape().to_vec(), input.to_f32_vec())?;
            let mask_vals = mask.to_f64_vec().iter().map(|&v| u8::from(v > 0.0)).collect();
            Ok(Sample2DPlus {
                center_mask: Tensor::from_u8(mask.shape().to_vec(), mask_vals)?,
                input,
                center_index,
            })
        })
        .collect()
}

/// Parameters of the synthetic serial-section generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    /// Standard deviation of additive Gaussian noise on the image.
    pub noise: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 0,
            depth: 64,
            height: 64,
            width: 64,
            n_objects: 2,
            noise: 0.05,
        }
    }
}

struct Blob {
    cy: f32,
    cx: f32,
    vy: f32,
    vx: f32,
    wobble_amp: f32,
    wobble_freq: f32,
    phase: f32,
    radius: f32,
    radius_amp: f32,
    brightness: f32,
}

impl Blob {
    fn at(&self, z: f32) -> (f32, f32, f32) {
        let s = (self.wobble_freq * z + self.phase).sin();
        let c = (self.wobble_freq * z + self.phase).cos();
        let cy = self.cy + self.vy * z + self.wobble_amp * s;
        let cx = self.cx + self.vx * z + self.wobble_amp * c;
        let r = self.radius * (1.0 + self.radius_amp * (0.5 * self.wobble_freq * z + self.phase).sin());
        (cy, cx, r)
    }
}

/// Soft-edged blobs drifting smoothly through z on a textured background.
/// Deterministic for a given `seed`.
pub fn synth_volume(p: &SynthParams) -> Result<Volume> {
    if p.depth < 16 || p.height < 16 || p.width < 16 {
        return Err(Error::Config(format!(
            "synthetic extents must be at least 16, got {}x{}x{}",
            p.depth, p.height, p.width
        )));
    }
    if p.n_objects == 0 {
        return Err(Error::Config("n_objects must be at least 1".into()));
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be >= 0, got {}", p.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (zd, h, w) = (p.depth, p.height, p.width);
    let side = h.min(w) as f32;
    let zc = zd as f32 / 2.0;
    let blobs: Vec<Blob> = (0..p.n_objects)
        .map(|_| {
            let radius = side * rng.gen_range(0.12..0.2);
            let speed = rng.gen_range(0.1..0.35);
            let angle = rng.gen_range(0.0..std::f32::consts::TAU);
            Blob {
                // centres are placed at mid-depth, drift spans both directions
                cy: rng.gen_range(0.3..0.7) * h as f32,
                cx: rng.gen_range(0.3..0.7) * w as f32,
                vy: speed * angle.sin(),
                vx: speed * angle.cos(),
                wobble_amp: side * rng.gen_range(0.03..0.08),
                wobble_freq: rng.gen_range(0.05..0.15),
                phase: rng.gen_range(0.0..std::f32::consts::TAU),
                radius,
                radius_amp: rng.gen_range(0.05..0.2),
                brightness: rng.gen_range(0.45..0.6),
            }
        })
        .collect();

    // low-frequency background texture, shared structure across slices
    let tex: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.02..0.06),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.01..0.03),
            )
        })
        .collect();

    let noise = Normal::new(0.0f32, p.noise.max(f32::MIN_POSITIVE)).expect("valid sigma");
    let softness = 1.5f32;
    let mut image = Vec::with_capacity(zd * h * w);
    let mut mask = Vec::with_capacity(zd * h * w);
    for z in 0..zd {
        let zf = z as f32 - zc;
        let placed: Vec<(f32, f32, f32, f32)> = blobs
            .iter()
            .map(|b| {
                let (cy, cx, r) = b.at(zf);
                (cy, cx, r, b.brightness)
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
                let mut fg = 0.0f32;
                let mut inside = false;
                for &(cy, cx, r, bright) in &placed {
                    let d = ((yf - cy).powi(2) + (xf - cx).powi(2)).sqrt();
                    let soft = 1.0 / (1.0 + ((d - r) / softness).exp());
                    fg = fg.max(bright * soft);
                    inside |= d <= r;
                }
                let mut bg = 0.25;
                for &(f, py, px, amp) in &tex {
                    bg += amp * (f * yf + py + 0.01 * zf).sin() * (f * xf + px).cos();
                }
                let mut v = bg + fg;
                if p.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                image.push(v.clamp(0.0, 1.0));
                mask.push(u8::from(inside));
            }
        }
    }
    Volume::new(
        Tensor::from_f32(vec![zd, h, w], image)?,
        Some(Tensor::from_u8(vec![zd, h, w], mask)?),
    )
}

/// Disjoint train/validation/test lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then `floor` sizes for validation and test with the
/// remainder going to training.
pub fn dataset_split<T>(samples: Vec<T>, ratios: (f64, f64, f64), seed: u64) -> Result<Split<T>> {
    if samples.is_empty() {
        return Err(Error::Config("cannot split an empty sample list".into()));
    }
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    if ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    let n = samples.len();
    let mut items: Vec<Option<T>> = samples.into_iter().map(Some).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (va * n as f64).floor() as usize;
    let n_test = (te * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut take = |idx: &[usize]| -> Vec<T> {
        idx.iter().map(|&i| items[i].take().expect("each index used once")).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(Split { train, val, test })
}
