//! One function per CLI verb. Every output lands under the run directory
//! unless a path is given explicitly.

use std::fs;
use std::path::{Path, PathBuf};

use asymaudit::bias::{bias_report, BiasReport};
use asymaudit::net::checkpoint::{is_checkpoint_dir, load_checkpoint, save_checkpoint};
use asymaudit::net::ops::sigmoid;
use asymaudit::net::{build_model, forward, train as train_model, Model};
use asymaudit::report::{
    bias_bars_svg, bias_table_csv, pairwise_csv, quality_csv, saliency_histogram_svg, saliency_profile_svg,
    to_json,
};
use asymaudit::saliency::{compute_many, read_map, write_map, Method, SaliencyMap};
use asymaudit::seg_metrics::{confusion, quality_report, QualityReport};
use asymaudit::surgery::{apply_strategy, edit_first_conv, Base, InitStrategy, KernelSource};
use asymaudit::volume::{
    dataset_split, list_slices, load_volume, read_samples, stack_all, synth_volume, write_samples, Sample2DPlus,
    Split, Volume, VolumeSource,
};
use asymaudit::{ntf_write, Error, Result};
use serde::Serialize;

use crate::config::Config;
use crate::Common;

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Refuse to touch a non-empty output directory unless forced; when forced,
/// clear it so stale files never mix with new ones.
fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.is_dir() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
    if occupied {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_config(run: &Path, cfg: &Config) -> Result<()> {
    write(&run.join("config.txt"), &cfg.canonical_text())
}

fn volume_source(path: &Path) -> Result<VolumeSource> {
    if path.is_dir() {
        let slices = list_slices(path, "pgm")?;
        if slices.is_empty() {
            return Err(Error::Config(format!("{} holds no .pgm slices", path.display())));
        }
        Ok(VolumeSource::Pgm(slices))
    } else {
        Ok(VolumeSource::Ntf(path.to_path_buf()))
    }
}

fn load_configured_volume(cfg: &Config, run: &Path) -> Result<Volume> {
    if cfg.is_synth() {
        let dir = run.join("volume");
        let image = dir.join("image.ntf");
        if !image.is_file() {
            return Err(Error::Io {
                path: image,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "run `synth` first"),
            });
        }
        return load_volume(&VolumeSource::Ntf(image), Some(&VolumeSource::Ntf(dir.join("mask.ntf"))));
    }
    let image = cfg
        .image_path()
        .ok_or_else(|| Error::Config("data.source=volume needs data.image".into()))?;
    let mask = cfg
        .mask_path()
        .ok_or_else(|| Error::Config("data.source=volume needs data.mask".into()))?;
    load_volume(&volume_source(&image)?, Some(&volume_source(&mask)?))
}

fn load_split(cfg: &Config, run: &Path) -> Result<Split<Sample2DPlus>> {
    let dir = run.join("samples");
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run `stack` first"),
        });
    }
    let samples = read_samples(&dir)?;
    dataset_split(samples, cfg.split(), cfg.split_seed())
}

fn sample_id(s: &Sample2DPlus) -> String {
    format!("sample-{:05}", s.center_index)
}

pub fn synth(cfg: &Config, c: &Common) -> Result<()> {
    let run = cfg.run_dir();
    let out = run.join("volume");
    prepare_output(&out, c.force)?;
    let v = synth_volume(&cfg.synth())?;
    ntf_write(v.image(), out.join("image.ntf"))?;
    ntf_write(v.mask().expect("synthetic volumes carry masks"), out.join("mask.ntf"))?;
    save_config(&run, cfg)?;
    println!("{}", out.display());
    Ok(())
}

pub fn stack(cfg: &Config, c: &Common) -> Result<()> {
    let run = cfg.run_dir();
    let v = load_configured_volume(cfg, &run)?;
    let samples = stack_all(&v, cfg.half_window(), cfg.class()?)?;
    let out = run.join("samples");
    prepare_output(&out, c.force)?;
    write_samples(&out, &samples)?;
    save_config(&run, cfg)?;
    println!("{} samples in {}", samples.len(), out.display());
    Ok(())
}

fn initial_model(cfg: &Config) -> Result<Model> {
    let m = build_model(&cfg.model())?;
    apply_strategy(&m, &cfg.strategy()?, cfg.model().seed, cfg.resample())
}

pub fn train(cfg: &Config, c: &Common) -> Result<()> {
    let run = cfg.run_dir();
    let split = load_split(cfg, &run)?;
    let mut m = initial_model(cfg)?;
    let out = run.join("checkpoint");
    prepare_output(&out, c.force)?;
    let history = train_model(&mut m, &split.train, &split.val, &cfg.train(), c.exec())?;
    save_checkpoint(&m, &out)?;
    let mut csv = String::from("step,train_loss,val_dice\n");
    for p in &history.points {
        let vd = p.val_dice.map_or(String::new(), |d| d.to_string());
        csv.push_str(&format!("{},{},{vd}\n", p.step, p.train_loss));
    }
    write(&run.join("history.csv"), &csv)?;
    save_config(&run, cfg)?;
    println!("{}", out.display());
    Ok(())
}

fn default_checkpoint(run: &Path, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| run.join("checkpoint"), Path::to_path_buf)
}

fn open_checkpoint(dir: &Path) -> Result<Model> {
    if !is_checkpoint_dir(dir) {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint manifest"),
        });
    }
    load_checkpoint(dir)
}

pub fn surgery(
    cfg: &Config,
    c: &Common,
    strategy: &str,
    checkpoint: Option<&Path>,
    source: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let run = cfg.run_dir();
    let ck = default_checkpoint(&run, checkpoint);
    let model = open_checkpoint(&ck)?;
    // weights come from --source when given, otherwise from the checkpoint itself
    let src = KernelSource::Path(source.map_or_else(|| ck.clone(), Path::to_path_buf));
    let s = match InitStrategy::parse(strategy, Some(Path::new("-")))? {
        InitStrategy::Random => InitStrategy::Random,
        InitStrategy::Pretrained(_) => InitStrategy::Pretrained(src.clone()),
        InitStrategy::UniformChannel { channel, .. } => InitStrategy::UniformChannel {
            channel,
            base: Base::Source(src.clone()),
        },
        InitStrategy::AverageChannels { .. } => InitStrategy::AverageChannels {
            base: Base::Source(src.clone()),
        },
    };
    let bias_from_source = source.is_some_and(is_checkpoint_dir);
    let result = edit_first_conv(&model, &s, cfg.init_seed(), cfg.resample(), bias_from_source)?;
    let out = out.map_or_else(|| run.join(format!("surgery-{strategy}")), Path::to_path_buf);
    prepare_output(&out, c.force)?;
    save_checkpoint(&result, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn maps_for(
    cfg: &Config,
    c: &Common,
    m: &Model,
    samples: &[Sample2DPlus],
    method: Method,
) -> Result<Vec<SaliencyMap>> {
    let inputs: Vec<(String, &asymaudit::Tensor)> = samples.iter().map(|s| (sample_id(s), &s.input)).collect();
    compute_many(m, &inputs, method, &cfg.saliency(), c.exec())
}

pub fn saliency(cfg: &Config, c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let run = cfg.run_dir();
    let m = open_checkpoint(&default_checkpoint(&run, checkpoint))?;
    let split = load_split(cfg, &run)?;
    let out = run.join("saliency");
    prepare_output(&out, c.force)?;
    for method in cfg.methods() {
        let maps = maps_for(cfg, c, &m, &split.test, method)?;
        let dir = out.join(method.name());
        for map in &maps {
            write_map(map, &dir, &map.meta.sample_id)?;
        }
    }
    save_config(&run, cfg)?;
    println!("{}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct AuditRow<'a> {
    pretrain: &'a str,
    checkpoint: String,
    quality: &'a QualityReport,
    bias: &'a [BiasReport],
}

fn quality_of(cfg: &Config, c: &Common, m: &Model, samples: &[Sample2DPlus]) -> Result<QualityReport> {
    let counts = c
        .exec()
        .map(samples, |s| -> Result<_> {
            let probs: Vec<f32> = forward(m, &s.input)?.to_f32_vec().into_iter().map(sigmoid).collect();
            confusion(&probs, s.mask_u8(), cfg.metric_threshold())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    quality_report(&counts, cfg.metric_threshold())
}

pub fn audit(cfg: &Config, c: &Common, models: &[String]) -> Result<()> {
    let run = cfg.run_dir();
    let split = load_split(cfg, &run)?;
    let targets: Vec<(String, PathBuf)> = if models.is_empty() {
        vec![(cfg.label(), run.join("checkpoint"))]
    } else {
        models
            .iter()
            .map(|s| {
                s.split_once('=')
                    .map(|(l, p)| (l.to_string(), PathBuf::from(p)))
                    .ok_or_else(|| Error::Config(format!("--model expects label=dir, got {s:?}")))
            })
            .collect::<Result<_>>()?
    };
    let methods = cfg.methods();
    if methods.iter().any(|m| m.is_unstable()) && !cfg.saliency().unstable {
        return Err(Error::Config("gradcampp_channel requires --unstable".into()));
    }
    let out = run.join("audit");
    prepare_output(&out, c.force)?;
    let mut bias_rows = Vec::new();
    let mut quality_rows = Vec::new();
    let mut checkpoints = Vec::new();
    for (label, dir) in &targets {
        let m = open_checkpoint(dir)?;
        let quality = quality_of(cfg, c, &m, &split.test)?;
        let mut reports = Vec::new();
        for &method in &methods {
            let maps = maps_for(cfg, c, &m, &split.test, method)?;
            let slices: Vec<&[f32]> = maps.iter().map(|s| s.as_slice()).collect();
            let mut r = bias_report(label, method.name(), m.in_channels(), &slices, cfg.bins(), cfg.pooling(), c.exec())?;
            if method.is_unstable() {
                r.flags.push("unstable".into());
            }
            reports.push(r);
        }
        bias_rows.push((label.clone(), reports));
        quality_rows.push((label.clone(), quality));
        checkpoints.push(dir.display().to_string());
    }
    let json_rows: Vec<AuditRow> = bias_rows
        .iter()
        .zip(&quality_rows)
        .zip(&checkpoints)
        .map(|(((label, bias), (_, quality)), ck)| AuditRow {
            pretrain: label,
            checkpoint: ck.clone(),
            quality,
            bias,
        })
        .collect();
    write(&out.join("bias.csv"), &bias_table_csv(&bias_rows)?)?;
    write(&out.join("pairwise.csv"), &pairwise_csv(&bias_rows))?;
    write(&out.join("quality.csv"), &quality_csv(&quality_rows))?;
    write(&out.join("audit.json"), &to_json(&json_rows))?;
    save_config(&run, cfg)?;
    println!("{}", out.display());
    Ok(())
}

pub fn plot(cfg: &Config, c: &Common) -> Result<()> {
    let run = cfg.run_dir();
    let sal = run.join("saliency");
    let audit_json = run.join("audit").join("audit.json");
    if !sal.is_dir() && !audit_json.is_file() {
        return Err(Error::Io {
            path: sal,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run `saliency` or `audit` first"),
        });
    }
    let out = run.join("plots");
    prepare_output(&out, c.force)?;
    let eq = cfg.equalize();
    let mut written = 0;
    if sal.is_dir() {
        for method in Method::ALL {
            let dir = sal.join(method.name());
            if !dir.is_dir() {
                continue;
            }
            let maps = list_slices(&dir, "ntf")?
                .iter()
                .map(|p| read_map(p))
                .collect::<Result<Vec<_>>>()?;
            let Some(first) = maps.first() else { continue };
            let s = first.values.shape().to_vec();
            let slices: Vec<&[f32]> = maps.iter().map(|m| m.as_slice()).collect();
            let title = format!("{} saliency", method.name());
            write(
                &out.join(format!("{}-profile.svg", method.name())),
                &saliency_profile_svg(&title, &slices, s[0], s[1], s[2], eq)?,
            )?;
            write(
                &out.join(format!("{}-hist.svg", method.name())),
                &saliency_histogram_svg(&title, &slices, s[0], cfg.plot_bins(), eq)?,
            )?;
            written += 2;
        }
    }
    if audit_json.is_file() {
        let text = fs::read_to_string(&audit_json).map_err(|e| Error::io(&audit_json, e))?;
        let rows: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", audit_json.display())))?;
        for row in rows.as_array().into_iter().flatten() {
            let label = row["pretrain"].as_str().unwrap_or("model");
            let reports: Vec<BiasReport> = serde_json::from_value(row["bias"].clone())
                .map_err(|e| Error::Malformed(format!("{}: {e}", audit_json.display())))?;
            let safe: String = label
                .chars()
                .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' })
                .collect();
            write(&out.join(format!("bias-{safe}.svg")), &bias_bars_svg(&format!("{label}: SWd and FWd"), &reports))?;
            written += 1;
        }
    }
    println!("{written} plots in {}", out.display());
    Ok(())
}
