//! `key = value` experiment configuration with a fixed schema.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use asymaudit::bias::Pooling;
use asymaudit::net::{ModelConfig, TrainConfig};
use asymaudit::saliency::{CamMode, Method, SaliencyParams};
use asymaudit::surgery::{InitStrategy, ResamplePolicy};
use asymaudit::volume::SynthParams;
use asymaudit::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy)]
enum Kind {
    Uint,
    Float,
    Bool,
    Text,
    UintList,
    FloatList(usize),
    Choice(&'static [&'static str]),
    Methods,
    Strategy,
}

const SCHEMA: &[(&str, &str, Kind)] = &[
    ("data.source", "synth", Kind::Choice(&["synth", "volume"])),
    ("data.image", "", Kind::Text),
    ("data.mask", "", Kind::Text),
    ("data.seed", "0", Kind::Uint),
    ("data.depth", "64", Kind::Uint),
    ("data.height", "64", Kind::Uint),
    ("data.width", "64", Kind::Uint),
    ("data.objects", "2", Kind::Uint),
    ("data.noise", "0.05", Kind::Float),
    ("data.class", "1", Kind::Uint),
    ("data.half_window", "1", Kind::Uint),
    ("data.split", "0.8,0.1,0.1", Kind::FloatList(3)),
    ("data.split_seed", "0", Kind::Uint),
    ("model.widths", "4,8", Kind::UintList),
    ("model.kernel", "3", Kind::Uint),
    ("model.levels", "2", Kind::Uint),
    ("model.seed", "0", Kind::Uint),
    ("train.lr", "0.03", Kind::Float),
    ("train.weight_decay", "0.0001", Kind::Float),
    ("train.steps", "500", Kind::Uint),
    ("train.batch", "4", Kind::Uint),
    ("train.seed", "0", Kind::Uint),
    ("train.flip_augment", "true", Kind::Bool),
    ("train.eval_every", "50", Kind::Uint),
    ("init.strategy", "random", Kind::Strategy),
    ("init.source", "", Kind::Text),
    ("init.resample", "center_crop", Kind::Choice(&["center_crop", "bilinear"])),
    ("init.seed", "0", Kind::Uint),
    ("saliency.methods", "foreground,full_output,foreground100,full_output100,occlusion", Kind::Methods),
    ("saliency.threshold", "0.85", Kind::Float),
    ("saliency.k", "100", Kind::Uint),
    ("saliency.seed", "0", Kind::Uint),
    ("saliency.patch", "16", Kind::Uint),
    ("saliency.layer", "", Kind::Text),
    ("saliency.cam_mode", "difference", Kind::Choice(&["difference", "occluded"])),
    ("saliency.unstable", "false", Kind::Bool),
    ("metrics.threshold", "0.5", Kind::Float),
    ("metrics.bins", "256", Kind::Uint),
    ("metrics.pooling", "pooled", Kind::Choice(&["pooled", "per_image"])),
    ("run.label", "", Kind::Text),
    ("plot.equalize", "false", Kind::Bool),
    ("plot.bins", "64", Kind::Uint),
    ("output.dir", "runs", Kind::Text),
    ("output.run", "", Kind::Text),
];

fn check(key: &str, value: &str, kind: Kind) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("{key}: {what}, got {value:?}"));
    match kind {
        Kind::Uint => value.parse::<u64>().map(|_| ()).map_err(|_| bad("expected a nonnegative integer")),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => Err(bad("expected a finite number")),
        },
        Kind::Bool => value.parse::<bool>().map(|_| ()).map_err(|_| bad("expected true or false")),
        Kind::Text => Ok(()),
        Kind::UintList => {
            if value.split(',').all(|v| v.trim().parse::<u64>().is_ok()) {
                Ok(())
            } else {
                Err(bad("expected comma-separated integers"))
            }
        }
        Kind::FloatList(n) => {
            let parts: Vec<&str> = value.split(',').collect();
            if parts.len() == n && parts.iter().all(|v| v.trim().parse::<f64>().is_ok()) {
                Ok(())
            } else {
                Err(bad(&format!("expected {n} comma-separated numbers")))
            }
        }
        Kind::Choice(opts) => {
            if opts.contains(&value) {
                Ok(())
            } else {
                Err(bad(&format!("expected one of {opts:?}")))
            }
        }
        Kind::Methods => {
            for m in value.split(',') {
                if Method::parse(m.trim()).is_none() {
                    return Err(bad(&format!("unknown method {m:?}")));
                }
            }
            Ok(())
        }
        Kind::Strategy => InitStrategy::parse(value, Some(Path::new("-"))).map(|_| ()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: SCHEMA.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (_, _, kind) = SCHEMA
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let value = value.trim();
        check(key, value, *kind)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = Config::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            c.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
            c.set(k.trim(), v)?;
        }
        Ok(c)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("schema key")
    }

    fn uint(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated")
    }

    fn usize(&self, key: &str) -> usize {
        self.uint(key) as usize
    }

    fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated")
    }

    fn flag(&self, key: &str) -> bool {
        self.get(key).parse().expect("validated")
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// Every resolved key except `output.*`, one `key=value` per line.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            if !k.starts_with("output.") {
                writeln!(out, "{k}={v}").unwrap();
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        let base = PathBuf::from(self.get("output.dir"));
        match self.get("output.run") {
            "" => base.join(format!("run-{}", self.hash())),
            name => base.join(name),
        }
    }

    pub fn is_synth(&self) -> bool {
        self.get("data.source") == "synth"
    }

    pub fn image_path(&self) -> Option<PathBuf> {
        self.path("data.image")
    }

    pub fn mask_path(&self) -> Option<PathBuf> {
        self.path("data.mask")
    }

    pub fn synth(&self) -> SynthParams {
        SynthParams {
            seed: self.uint("data.seed"),
            depth: self.usize("data.depth"),
            height: self.usize("data.height"),
            width: self.usize("data.width"),
            n_objects: self.usize("data.objects"),
            noise: self.float("data.noise") as f32,
        }
    }

    pub fn class(&self) -> Result<u8> {
        u8::try_from(self.uint("data.class"))
            .map_err(|_| Error::Config("data.class must fit in 0..=255".into()))
    }

    pub fn half_window(&self) -> usize {
        self.usize("data.half_window")
    }

    pub fn split(&self) -> (f64, f64, f64) {
        let v: Vec<f64> = self
            .get("data.split")
            .split(',')
            .map(|s| s.trim().parse().expect("validated"))
            .collect();
        (v[0], v[1], v[2])
    }

    pub fn split_seed(&self) -> u64 {
        self.uint("data.split_seed")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 2 * self.half_window() + 1,
            widths: self
                .get("model.widths")
                .split(',')
                .map(|s| s.trim().parse().expect("validated"))
                .collect(),
            kernel: self.usize("model.kernel"),
            levels: self.usize("model.levels"),
            seed: self.uint("model.seed"),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.float("train.lr") as f32,
            weight_decay: self.float("train.weight_decay") as f32,
            steps: self.usize("train.steps"),
            batch: self.usize("train.batch"),
            seed: self.uint("train.seed"),
            flip_augment: self.flag("train.flip_augment"),
            eval_every: self.usize("train.eval_every"),
            eval_threshold: self.float("metrics.threshold") as f32,
        }
    }

    pub fn strategy(&self) -> Result<InitStrategy> {
        InitStrategy::parse(self.get("init.strategy"), self.path("init.source").as_deref())
    }

    pub fn strategy_name(&self) -> &str {
        self.get("init.strategy")
    }

    pub fn init_seed(&self) -> u64 {
        self.uint("init.seed")
    }

    pub fn resample(&self) -> ResamplePolicy {
        ResamplePolicy::parse(self.get("init.resample")).expect("validated")
    }

    pub fn methods(&self) -> Vec<Method> {
        self.get("saliency.methods")
            .split(',')
            .map(|m| Method::parse(m.trim()).expect("validated"))
            .collect()
    }

    pub fn saliency(&self) -> SaliencyParams {
        SaliencyParams {
            threshold: self.float("saliency.threshold") as f32,
            k: self.usize("saliency.k"),
            seed: self.uint("saliency.seed"),
            patch: self.usize("saliency.patch"),
            layer: self.path("saliency.layer").map(|p| p.display().to_string()),
            cam_mode: CamMode::parse(self.get("saliency.cam_mode")).expect("validated"),
            unstable: self.flag("saliency.unstable"),
        }
    }

    pub fn metric_threshold(&self) -> f32 {
        self.float("metrics.threshold") as f32
    }

    pub fn bins(&self) -> usize {
        self.usize("metrics.bins")
    }

    pub fn pooling(&self) -> Pooling {
        Pooling::parse(self.get("metrics.pooling")).expect("validated")
    }

    /// Row label for reports: `run.label`, or the init strategy.
    pub fn label(&self) -> String {
        match self.get("run.label") {
            "" => self.strategy_name().to_string(),
            l => l.to_string(),
        }
    }

    pub fn equalize(&self) -> bool {
        self.flag("plot.equalize")
    }

    pub fn plot_bins(&self) -> usize {
        self.usize("plot.bins")
    }
}
