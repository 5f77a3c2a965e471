//! The strategy-comparison experiment: train several first-layer
//! initializations on the same synthetic data and compare their saliency
//! asymmetry and segmentation quality.

use serde::{Deserialize, Serialize};

use crate::bias::{bias_report, BiasReport, Pooling};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::net::{build_model, forward, train, Model, ModelConfig, TrainConfig};
use crate::saliency::{compute_many, Method, SaliencyParams};
use crate::seg_metrics::{confusion, quality_report, QualityReport};
use crate::surgery::{apply_strategy, scale_channels, uniformize_channel, Base, InitStrategy, KernelSource, ResamplePolicy};
use crate::net::ops::sigmoid;
use crate::volume::{dataset_split, stack_all, synth_volume, Sample2DPlus, SynthParams};

/// The three initializations compared by the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// First conv loaded from a kernel whose slices carry unequal scales.
    Biased,
    NonPretrained,
    /// The biased kernel's middle slice copied to every channel.
    UniformGreen,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Biased, Arm::NonPretrained, Arm::UniformGreen];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Biased => "biased",
            Arm::NonPretrained => "non_pretrained",
            Arm::UniformGreen => "uniform_green",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synth: SynthParams,
    pub half_window: usize,
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Per-slice scales of the biased arm's source kernel, whose slices are
    /// otherwise copies of the seed's random centre slice.
    pub kernel_scales: Vec<f32>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub saliency: SaliencyParams,
    pub bins: usize,
    pub metric_threshold: f32,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthParams::default(),
            half_window: 1,
            split: (0.8, 0.1, 0.1),
            split_seed: 0,
            model: ModelConfig {
                widths: vec![4, 8],
                ..Default::default()
            },
            train: TrainConfig {
                lr: 0.03,
                eval_every: 0,
                ..Default::default()
            },
            kernel_scales: vec![1.0, 0.6, 0.2],
            seeds: (0..5).collect(),
            methods: vec![
                Method::Foreground,
                Method::FullOutput,
                Method::Foreground100,
                Method::FullOutput100,
                Method::Occlusion,
                Method::GradCamPpChannel,
            ],
            saliency: SaliencyParams {
                unstable: true,
                ..Default::default()
            },
            bins: 256,
            metric_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub quality: QualityReport,
    pub reports: Vec<BiasReport>,
}

impl ArmRun {
    pub fn swd(&self, method: Method) -> Option<f64> {
        self.reports.iter().find(|r| r.method == method.name()).map(|r| r.swd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub runs: Vec<ArmRun>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl ExperimentResult {
    fn of(&self, arm: Arm) -> impl Iterator<Item = &ArmRun> {
        self.runs.iter().filter(move |r| r.arm == arm)
    }

    /// Median SWd over seeds for one arm and method.
    pub fn median_swd(&self, arm: Arm, method: Method) -> Option<f64> {
        let v: Vec<f64> = self.of(arm).filter_map(|r| r.swd(method)).collect();
        (!v.is_empty()).then(|| median(v))
    }

    /// Mean over seeds of the per-run mean test Dice.
    pub fn mean_dice(&self, arm: Arm) -> Option<f64> {
        let v: Vec<f64> = self.of(arm).map(|r| r.quality.dice.mean).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn min_dice(&self, arm: Arm) -> Option<f64> {
        self.of(arm).map(|r| r.quality.dice.mean).min_by(f64::total_cmp)
    }
}

/// Synthetic samples split into train/val/test.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<crate::volume::Split<Sample2DPlus>> {
    let v = synth_volume(&cfg.synth)?;
    let samples = stack_all(&v, cfg.half_window, 1)?;
    dataset_split(samples, cfg.split, cfg.split_seed)
}

/// Untrained model for one arm and seed.
pub fn init_arm(cfg: &ExperimentConfig, arm: Arm, seed: u64) -> Result<Model> {
    let base = build_model(&ModelConfig {
        seed,
        in_channels: 2 * cfg.half_window + 1,
        ..cfg.model.clone()
    })?;
    let centre = uniformize_channel(&base.first_conv().weight_tensor(), cfg.half_window)?;
    let source = scale_channels(&centre, &cfg.kernel_scales)?;
    let strategy = match arm {
        Arm::NonPretrained => InitStrategy::Random,
        Arm::Biased => InitStrategy::Pretrained(KernelSource::Kernel(source)),
        Arm::UniformGreen => InitStrategy::UniformChannel {
            channel: cfg.half_window,
            base: Base::Source(KernelSource::Kernel(source)),
        },
    };
    apply_strategy(&base, &strategy, seed, ResamplePolicy::CenterCrop)
}

/// Test-set quality and one bias report per method for a trained model.
pub fn evaluate(
    m: &Model,
    label: &str,
    test: &[Sample2DPlus],
    cfg: &ExperimentConfig,
    exec: Exec,
) -> Result<(QualityReport, Vec<BiasReport>)> {
    let counts = exec
        .map(test, |s| -> Result<_> {
            let logits = forward(m, &s.input)?;
            let probs: Vec<f32> = logits.to_f32_vec().into_iter().map(sigmoid).collect();
            confusion(&probs, s.mask_u8(), cfg.metric_threshold)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let quality = quality_report(&counts, cfg.metric_threshold)?;
    let inputs: Vec<(String, &crate::tensor::Tensor)> = test
        .iter()
        .map(|s| (format!("sample-{:05}", s.center_index), &s.input))
        .collect();
    let n = m.in_channels();
    let mut reports = Vec::new();
    for &method in &cfg.methods {
        let maps = compute_many(m, &inputs, method, &cfg.saliency, exec)?;
        let slices: Vec<&[f32]> = maps.iter().map(|s| s.as_slice()).collect();
        let mut r = bias_report(label, method.name(), n, &slices, cfg.bins, Pooling::Pooled, exec)?;
        if method.is_unstable() {
            r.flags.push("unstable".into());
        }
        reports.push(r);
    }
    Ok((quality, reports))
}

/// Train and evaluate every arm for every seed. `progress` receives each run
/// as it finishes.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    exec: Exec,
    mut progress: impl FnMut(&ArmRun),
) -> Result<ExperimentResult> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    let data = prepare_data(cfg)?;
    if data.test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for arm in Arm::ALL {
            let mut m = init_arm(cfg, arm, seed)?;
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            train(&mut m, &data.train, &data.val, &tc, exec)?;
            let label = format!("{}-seed{seed}", arm.name());
            let (quality, reports) = evaluate(&m, &label, &data.test, cfg, exec)?;
            let run = ArmRun {
                arm,
                seed,
                quality,
                reports,
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(ExperimentResult { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surgery::first_conv_channels_equal;

    #[test]
    fn arms_share_non_first_layers() {
        let cfg = ExperimentConfig::default();
        let a = init_arm(&cfg, Arm::Biased, 3).unwrap();
        let b = init_arm(&cfg, Arm::NonPretrained, 3).unwrap();
        let u = init_arm(&cfg, Arm::UniformGreen, 3).unwrap();
        assert_eq!(a.params()[1..], b.params()[1..]);
        assert_eq!(a.params()[1..], u.params()[1..]);
        assert!(first_conv_channels_equal(&u));
        let (pa, pb) = (a.first_conv(), b.first_conv());
        for (i, x) in pa.weight.iter().enumerate() {
            let (o, c, t) = (i / 27, (i / 9) % 3, i % 9);
            assert_eq!(*x, pb.weight[o * 27 + 9 + t] * cfg.kernel_scales[c]);
        }
    }

    #[test]
    fn median_and_summaries() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
