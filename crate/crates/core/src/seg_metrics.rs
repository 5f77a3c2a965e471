//! Pixel-level segmentation quality: confusion counts, the five overlap
//! scores and their per-image standard errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Counts from `pred >= threshold` against a binary ground truth.
pub fn confusion(pred_probs: &[f32], gt: &[u8], threshold: f32) -> Result<ConfusionCounts> {
    if pred_probs.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred_probs.len(),
            gt.len()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0,1), got {threshold}")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred_probs.iter().zip(gt) {
        match (p >= threshold, g > 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// A ratio score. `empty` marks the 0/0 case, which scores 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub empty: bool,
}

fn ratio(num: u64, den: u64) -> Score {
    if den == 0 {
        Score {
            value: 1.0,
            empty: true,
        }
    } else {
        Score {
            value: num as f64 / den as f64,
            empty: false,
        }
    }
}

pub fn dice(c: &ConfusionCounts) -> Score {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn iou(c: &ConfusionCounts) -> Score {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

pub fn precision(c: &ConfusionCounts) -> Score {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> Score {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn accuracy(c: &ConfusionCounts) -> Score {
    ratio(c.tp + c.tn, c.total())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMetric {
    Dice,
    Iou,
    Precision,
    Recall,
    Accuracy,
}

impl QualityMetric {
    pub const ALL: [QualityMetric; 5] = [
        QualityMetric::Dice,
        QualityMetric::Iou,
        QualityMetric::Precision,
        QualityMetric::Recall,
        QualityMetric::Accuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QualityMetric::Dice => "dice",
            QualityMetric::Iou => "iou",
            QualityMetric::Precision => "precision",
            QualityMetric::Recall => "recall",
            QualityMetric::Accuracy => "accuracy",
        }
    }

    pub fn score(self, c: &ConfusionCounts) -> Score {
        match self {
            QualityMetric::Dice => dice(c),
            QualityMetric::Iou => iou(c),
            QualityMetric::Precision => precision(c),
            QualityMetric::Recall => recall(c),
            QualityMetric::Accuracy => accuracy(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub per_image: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(M)`.
    pub se: f64,
    /// Set when only one image was summarized (SE is reported as 0).
    pub single: bool,
}

pub fn summarize(per_image: &[f64]) -> Result<ScoreSummary> {
    if per_image.is_empty() {
        return Err(Error::Config("cannot summarize zero images".into()));
    }
    let m = per_image.len() as f64;
    let mean = per_image.iter().sum::<f64>() / m;
    if per_image.len() == 1 {
        return Ok(ScoreSummary {
            per_image: per_image.to_vec(),
            mean,
            se: 0.0,
            single: true,
        });
    }
    let var = per_image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(ScoreSummary {
        per_image: per_image.to_vec(),
        mean,
        se: var.sqrt() / m.sqrt(),
        single: false,
    })
}

/// Per-metric summaries over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub threshold: f32,
    pub dice: ScoreSummary,
    pub iou: ScoreSummary,
    pub precision: ScoreSummary,
    pub recall: ScoreSummary,
    pub accuracy: ScoreSummary,
}

impl QualityReport {
    pub fn get(&self, m: QualityMetric) -> &ScoreSummary {
        match m {
            QualityMetric::Dice => &self.dice,
            QualityMetric::Iou => &self.iou,
            QualityMetric::Precision => &self.precision,
            QualityMetric::Recall => &self.recall,
            QualityMetric::Accuracy => &self.accuracy,
        }
    }
}

pub fn quality_report(counts: &[ConfusionCounts], threshold: f32) -> Result<QualityReport> {
    let s = |m: QualityMetric| {
        let v: Vec<f64> = counts.iter().map(|c| m.score(c).value).collect();
        summarize(&v)
    };
    Ok(QualityReport {
        threshold,
        dice: s(QualityMetric::Dice)?,
        iou: s(QualityMetric::Iou)?,
        precision: s(QualityMetric::Precision)?,
        recall: s(QualityMetric::Recall)?,
        accuracy: s(QualityMetric::Accuracy)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_case() {
        let c = confusion(&[0.9, 0.9, 0.1, 0.9], &[1, 0, 0, 1], 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 1, fn_: 0, tn: 1 });
    }

    #[test]
    fn exact_and_inverted_predictions() {
        let gt = [1u8, 0, 1, 1, 0];
        let exact: Vec<f32> = gt.iter().map(|&g| g as f32).collect();
        let c = confusion(&exact, &gt, 0.5).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        for m in QualityMetric::ALL {
            assert_eq!(m.score(&c).value, 1.0);
        }
        let inv: Vec<f32> = gt.iter().map(|&g| 1.0 - g as f32).collect();
        let c = confusion(&inv, &gt, 0.5).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn confusion_errors() {
        assert!(confusion(&[0.5], &[1, 0], 0.5).is_err());
        assert!(confusion(&[0.5], &[1], 1.0).is_err());
    }

    #[test]
    fn hand_arithmetic_scores() {
        let c = ConfusionCounts { tp: 3, fp: 1, fn_: 3, tn: 0 };
        assert!((dice(&c).value - 0.6).abs() < 1e-15);
        assert!((iou(&c).value - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn empty_denominator_flagged() {
        let c = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 10 };
        let d = dice(&c);
        assert_eq!(d, Score { value: 1.0, empty: true });
        assert!(!accuracy(&c).empty);
    }

    #[test]
    fn summaries() {
        let s = summarize(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!((s.mean, s.se), (0.5, 0.0));
        let s = summarize(&[0.0, 1.0]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert!((s.se - 0.5).abs() < 1e-15);
        let s = summarize(&[0.7]).unwrap();
        assert!(s.single && s.se == 0.0);
        assert!(summarize(&[]).is_err());
        let a = summarize(&[0.1, 0.9, 0.4]).unwrap();
        let b = summarize(&[0.9, 0.4, 0.1]).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-15 && (a.se - b.se).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn score_identities(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            let c = ConfusionCounts { tp, fp, fn_, tn };
            let (d, j) = (dice(&c).value, iou(&c).value);
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            prop_assert!(d >= j - 1e-15);
            for m in QualityMetric::ALL {
                let v = m.score(&c).value;
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn accuracy_ignores_threshold_on_hard_probs(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..64), t in 0.01f32..0.99) {
            let probs: Vec<f32> = bits.iter().map(|b| if b.0 { 1.0 } else { 0.0 }).collect();
            let gt: Vec<u8> = bits.iter().map(|b| u8::from(b.1)).collect();
            let a = accuracy(&confusion(&probs, &gt, t).unwrap()).value;
            let b = accuracy(&confusion(&probs, &gt, 0.5).unwrap()).value;
            prop_assert_eq!(a, b);
        }
    }
}
