//! Plain mini-batch SGD with decoupled-in-the-update weight decay:
//! `p ← p − lr·(∂loss/∂p + weight_decay·p)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{sigmoid, Fmap};
use super::{loss_and_grads, Grads, Model};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seg_metrics::{confusion, dice};
use crate::volume::Sample2DPlus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Random joint horizontal/vertical flips of all channels and the mask.
    pub flip_augment: bool,
    /// Steps between history points; 0 records only the final step.
    pub eval_every: usize,
    /// Probability threshold for the validation Dice in the history.
    pub eval_threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            weight_decay: 1e-4,
            steps: 500,
            batch: 4,
            seed: 0,
            flip_augment: true,
            eval_every: 50,
            eval_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a finite value >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean batch loss since the previous point.
    pub train_loss: f64,
    /// Mean per-image Dice on the validation list, if one was given.
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Batch loss at every step, before that step's update.
    pub losses: Vec<f64>,
    pub points: Vec<EvalPoint>,
}

fn flipped(x: &Fmap, mask: &[u8], flip_h: bool, flip_v: bool) -> (Fmap, Vec<u8>) {
    if !flip_h && !flip_v {
        return (x.clone(), mask.to_vec());
    }
    let (h, w) = (x.h, x.w);
    let src = |y: usize, xx: usize| {
        let sy = if flip_v { h - 1 - y } else { y };
        let sx = if flip_h { w - 1 - xx } else { xx };
        sy * w + sx
    };
    let mut out = Fmap::zeros(x.c, h, w);
    let mut m = vec![0u8; h * w];
    for y in 0..h {
        for xx in 0..w {
            let s = src(y, xx);
            for c in 0..x.c {
                out.data[c * h * w + y * w + xx] = x.data[c * h * w + s];
            }
            m[y * w + xx] = mask[s];
        }
    }
    (out, m)
}

fn sample_fmap(s: &Sample2DPlus) -> Fmap {
    Fmap::from_vec(s.channels(), s.height(), s.width(), s.input_f32().to_vec())
}

/// Mean per-image Dice of `m` on `samples` at `threshold`.
pub fn mean_dice(m: &Model, samples: &[Sample2DPlus], threshold: f32, exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let scores = exec.map(samples, |s| -> Result<f64> {
        let logits = m.logits_fmap(sample_fmap(s));
        let probs: Vec<f32> = logits.data.iter().map(|&z| sigmoid(z)).collect();
        Ok(dice(&confusion(&probs, s.mask_u8(), threshold)?).value)
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Train `m` in place. Deterministic for fixed seeds regardless of `exec`:
/// per-sample gradients are reduced in batch order.
pub fn train(
    m: &mut Model,
    train: &[Sample2DPlus],
    val: &[Sample2DPlus],
    tc: &TrainConfig,
    exec: Exec,
) -> Result<TrainHistory> {
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for s in train.iter().chain(val) {
        m.check_input(s.channels(), s.height(), s.width())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut history = TrainHistory {
        losses: Vec::with_capacity(tc.steps),
        points: Vec::new(),
    };
    let mut interval_loss = 0.0;
    let mut interval_n = 0usize;

    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            let (fh, fv) = if tc.flip_augment {
                (rng.gen::<bool>(), rng.gen::<bool>())
            } else {
                (false, false)
            };
            batch.push((idx, fh, fv));
        }

        let per_sample = exec.map(&batch, |&(idx, fh, fv)| {
            let s = &train[idx];
            let (x, mask) = flipped(&sample_fmap(s), s.mask_u8(), fh, fv);
            loss_and_grads(m, x, &mask)
        });

        let mut total = Grads::zeros_like(m);
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            total.add_assign(g);
        }
        loss /= tc.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: format!("loss is {loss}"),
            });
        }
        total.scale(1.0 / tc.batch as f32);
        for (p, (gw, gb)) in m.params.iter_mut().zip(total.weight.iter().zip(&total.bias)) {
            for (w, g) in p.weight.iter_mut().zip(gw) {
                *w -= tc.lr * (g + tc.weight_decay * *w);
            }
            for (b, g) in p.bias.iter_mut().zip(gb) {
                *b -= tc.lr * (g + tc.weight_decay * *b);
            }
        }
        if m.params.iter().any(|p| p.weight.iter().chain(&p.bias).any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                step,
                what: "non-finite parameter after update".into(),
            });
        }

        history.losses.push(loss);
        interval_loss += loss;
        interval_n += 1;
        let last = step + 1 == tc.steps;
        if last || (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) {
            let val_dice = if val.is_empty() {
                None
            } else {
                Some(mean_dice(m, val, tc.eval_threshold, exec)?)
            };
            history.points.push(EvalPoint {
                step: step + 1,
                train_loss: interval_loss / interval_n as f64,
                val_dice,
            });
            interval_loss = 0.0;
            interval_n = 0;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_model, forward, ModelConfig};
    use crate::volume::{stack_all, synth_volume, SynthParams};

    fn tiny_samples() -> Vec<Sample2DPlus> {
        let v = synth_volume(&SynthParams {
            depth: 16,
            height: 16,
            width: 16,
            ..Default::default()
        })
        .unwrap();
        stack_all(&v, 1, 1).unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            widths: vec![4, 8],
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let samples = tiny_samples();
        let mut m = build_model(&small_cfg()).unwrap();
        let before = m.clone();
        let tc = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            steps: 3,
            batch: 2,
            ..Default::default()
        };
        train(&mut m, &samples, &[], &tc, Exec::Sequential).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn memorizes_single_sample() {
        let samples = tiny_samples();
        let one = vec![samples[5].clone()];
        let mut m = build_model(&small_cfg()).unwrap();
        let initial = crate::net::bce_with_logits(
            forward(&m, &one[0].input).unwrap().as_f32().unwrap(),
            one[0].mask_u8(),
        )
        .unwrap();
        let tc = TrainConfig {
            steps: 200,
            batch: 1,
            flip_augment: false,
            ..Default::default()
        };
        train(&mut m, &one, &[], &tc, Exec::Sequential).unwrap();
        let fin = crate::net::bce_with_logits(
            forward(&m, &one[0].input).unwrap().as_f32().unwrap(),
            one[0].mask_u8(),
        )
        .unwrap();
        assert!(fin < initial, "loss {initial} -> {fin}");
    }

    #[test]
    fn training_is_deterministic_across_exec_modes() {
        let samples = tiny_samples();
        let tc = TrainConfig {
            steps: 4,
            batch: 3,
            eval_every: 2,
            ..Default::default()
        };
        let mut a = build_model(&small_cfg()).unwrap();
        let mut b = a.clone();
        let ha = train(&mut a, &samples[..8], &samples[8..], &tc, Exec::Sequential).unwrap();
        let hb = train(&mut b, &samples[..8], &samples[8..], &tc, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.points.len(), 2);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let samples = tiny_samples();
        let mut m = build_model(&small_cfg()).unwrap();
        let tc = TrainConfig {
            lr: 1e30,
            steps: 5,
            batch: 1,
            ..Default::default()
        };
        match train(&mut m, &samples, &[], &tc, Exec::Sequential) {
            Err(Error::Divergence { step, .. }) => assert!(step < 5),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn flips_move_mask_with_channels() {
        let x = Fmap::from_vec(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let (f, m) = flipped(&x, &[1, 0, 0, 0], true, false);
        assert_eq!(f.data, vec![2.0, 1.0, 4.0, 3.0, 6.0, 5.0, 8.0, 7.0]);
        assert_eq!(m, vec![0, 1, 0, 0]);
    }
}
