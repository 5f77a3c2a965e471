//! Checkpoint directories: one NTF per parameter tensor plus `manifest.txt`.
//!
//! ```text
//! asymaudit-checkpoint 1
//! in_channels 3
//! levels 2
//! layers conv:enc0.conv1 relu conv:enc0.conv2 relu push pool ... conv:head
//! tensor 0 enc0.conv1.weight 8x3x3x3 first_conv
//! tensor 1 enc0.conv1.bias 8 first_conv
//! ...
//! ```
//!
//! Tensor lines list `order name shape role`; the file for a tensor is
//! `<name>.ntf` next to the manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ConvParam, Layer, Model, ParamRole};
use crate::error::{Error, Result};
use crate::tensor::{ntf_read, ntf_write, Tensor};

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "asymaudit-checkpoint 1";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Malformed(format!("bad shape {s:?}"))))
        .collect()
}

pub fn manifest_text(m: &Model) -> String {
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(out, "in_channels {}", m.in_channels).unwrap();
    writeln!(out, "levels {}", m.levels).unwrap();
    let layers: Vec<String> = m
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv(p) => format!("conv:{}", m.params[*p].name),
            Layer::Relu => "relu".into(),
            Layer::MaxPool2 => "pool".into(),
            Layer::Upsample2 => "up".into(),
            Layer::PushSkip => "push".into(),
            Layer::ConcatSkip => "concat".into(),
        })
        .collect();
    writeln!(out, "layers {}", layers.join(" ")).unwrap();
    let mut order = 0;
    for p in &m.params {
        for (suffix, shape) in [
            ("weight", vec![p.out_c, p.in_c, p.k, p.k]),
            ("bias", vec![p.out_c]),
        ] {
            writeln!(
                out,
                "tensor {order} {}.{suffix} {} {}",
                p.name,
                shape_str(&shape),
                p.role.as_str()
            )
            .unwrap();
            order += 1;
        }
    }
    out
}

pub fn save_checkpoint(m: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in &m.params {
        ntf_write(&p.weight_tensor(), dir.join(format!("{}.weight.ntf", p.name)))?;
        ntf_write(&p.bias_tensor(), dir.join(format!("{}.bias.ntf", p.name)))?;
    }
    let manifest = dir.join(MANIFEST);
    fs::write(&manifest, manifest_text(m)).map_err(|e| Error::io(&manifest, e))
}

pub fn is_checkpoint_dir(path: &Path) -> bool {
    path.join(MANIFEST).is_file()
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let bad = |what: String| Error::Malformed(format!("{}: {what}", manifest.display()));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some(HEADER) {
        return Err(bad("missing checkpoint header".into()));
    }
    let mut in_channels = None;
    let mut levels = None;
    let mut layer_tokens: Vec<String> = Vec::new();
    let mut tensors: Vec<(usize, String, Vec<usize>, ParamRole)> = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["in_channels", v] => {
                in_channels = Some(v.parse().map_err(|_| bad(format!("bad in_channels {v}")))?)
            }
            ["levels", v] => levels = Some(v.parse().map_err(|_| bad(format!("bad levels {v}")))?),
            ["layers", rest @ ..] => layer_tokens = rest.iter().map(|s| s.to_string()).collect(),
            ["tensor", order, name, shape, role] => {
                let order = order.parse().map_err(|_| bad(format!("bad order {order}")))?;
                let role =
                    ParamRole::parse(role).ok_or_else(|| bad(format!("unknown role {role}")))?;
                tensors.push((order, name.to_string(), parse_shape(shape)?, role));
            }
            _ => return Err(bad(format!("unrecognized line {line:?}"))),
        }
    }
    let in_channels = in_channels.ok_or_else(|| bad("missing in_channels".into()))?;
    let levels = levels.ok_or_else(|| bad("missing levels".into()))?;
    tensors.sort_by_key(|t| t.0);

    let mut params: Vec<ConvParam> = Vec::new();
    for (_, name, shape, role) in &tensors {
        let t = ntf_read(dir.join(format!("{name}.ntf")))?;
        if t.shape() != shape.as_slice() {
            return Err(bad(format!(
                "{name}: manifest shape {shape:?}, file shape {:?}",
                t.shape()
            )));
        }
        let values = t.to_f32_vec();
        if let Some(base) = name.strip_suffix(".weight") {
            if shape.len() != 4 || shape[2] != shape[3] {
                return Err(bad(format!("{name}: weights must be [out,in,k,k]")));
            }
            params.push(ConvParam {
                name: base.to_string(),
                out_c: shape[0],
                in_c: shape[1],
                k: shape[2],
                weight: values,
                bias: vec![0.0; shape[0]],
                role: *role,
            });
        } else if let Some(base) = name.strip_suffix(".bias") {
            let p = params
                .iter_mut()
                .find(|p| p.name == base)
                .ok_or_else(|| bad(format!("bias {name} precedes its weight")))?;
            if values.len() != p.out_c {
                return Err(bad(format!("{name}: expected {} values", p.out_c)));
            }
            p.bias = values;
        } else {
            return Err(bad(format!("tensor {name} is neither weight nor bias")));
        }
    }

    let layers = layer_tokens
        .iter()
        .map(|tok| match tok.as_str() {
            "relu" => Ok(Layer::Relu),
            "pool" => Ok(Layer::MaxPool2),
            "up" => Ok(Layer::Upsample2),
            "push" => Ok(Layer::PushSkip),
            "concat" => Ok(Layer::ConcatSkip),
            other => {
                let name = other
                    .strip_prefix("conv:")
                    .ok_or_else(|| bad(format!("unknown layer {other}")))?;
                params
                    .iter()
                    .position(|p| p.name == name)
                    .map(Layer::Conv)
                    .ok_or_else(|| bad(format!("layer references unknown conv {name}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Model::from_parts(in_channels, levels, layers, params)
}

/// Read a first-conv kernel `[out, in, k, k]` from an NTF file.
pub fn read_kernel(path: &Path) -> Result<Tensor> {
    let t = ntf_read(path)?;
    if t.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "{}: kernel must be [out,in,k,k], got {:?}",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}
