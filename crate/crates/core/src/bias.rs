//! Per-channel saliency distributions and the distances between them.
//!
//! The symmetric score pairs mirror channels around the centre slice,
//! `SWd = mean_{n=1..(N-1)/2} W(Sd[c-n], Sd[c+n])` with `c = (N-1)/2`, and the
//! full score averages `W` over every unordered channel pair. `W` is the exact
//! 1-D Wasserstein-1 distance between empirical distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Pooled, sorted saliency intensities of one input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDistribution {
    pub channel: usize,
    samples: Vec<f64>,
}

impl ChannelDistribution {
    pub fn new(channel: usize, mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config(format!("channel {channel} has no samples")));
        }
        if samples.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Malformed(format!(
                "channel {channel}: intensities must be finite and nonnegative"
            )));
        }
        samples.sort_by(f64::total_cmp);
        Ok(ChannelDistribution { channel, samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn scaled(&self, s: f64) -> Self {
        ChannelDistribution {
            channel: self.channel,
            samples: self.samples.iter().map(|v| v * s).collect(),
        }
    }
}

/// Pool `[N, H, W]` planes from several maps into one distribution per channel.
pub fn pool_channels<'a>(
    n_channels: usize,
    maps: impl IntoIterator<Item = &'a [f32]>,
) -> Result<Vec<ChannelDistribution>> {
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); n_channels];
    let mut seen = 0;
    for values in maps {
        if values.len() % n_channels != 0 {
            return Err(Error::Shape(format!(
                "map of {} values does not split into {n_channels} channels",
                values.len()
            )));
        }
        let plane = values.len() / n_channels;
        for (c, chunk) in values.chunks_exact(plane).enumerate() {
            pooled[c].extend(chunk.iter().map(|&v| v as f64));
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Config("no saliency maps to pool".into()));
    }
    pooled
        .into_iter()
        .enumerate()
        .map(|(c, s)| ChannelDistribution::new(c, s))
        .collect()
}

/// Exact W1 between two empirical distributions: the integral of
/// `|F_a(x) − F_b(x)|` over the merged support.
pub fn wasserstein_1d(a: &ChannelDistribution, b: &ChannelDistribution) -> f64 {
    let (xa, xb) = (&a.samples, &b.samples);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = xa[0].min(xb[0]);
    let mut acc = 0.0;
    while i < xa.len() || j < xb.len() {
        let x = match (xa.get(i), xb.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        acc += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        prev = x;
        while xa.get(i) == Some(&x) {
            i += 1;
        }
        while xb.get(j) == Some(&x) {
            j += 1;
        }
    }
    acc
}

fn check_odd(n: usize) -> Result<()> {
    if n < 3 || n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "symmetric distance needs an odd channel count >= 3, got {n}"
        )));
    }
    Ok(())
}

/// Mean W1 over mirrored channel pairs around the centre channel.
pub fn swd(dists: &[ChannelDistribution]) -> Result<f64> {
    check_odd(dists.len())?;
    let c = (dists.len() - 1) / 2;
    let sum: f64 = (1..=c).map(|n| wasserstein_1d(&dists[c - n], &dists[c + n])).sum();
    Ok(sum / c as f64)
}

/// Mean W1 over all unordered channel pairs.
pub fn fwd(dists: &[ChannelDistribution]) -> Result<f64> {
    let n = dists.len();
    if n < 2 {
        return Err(Error::Config(format!("full distance needs >= 2 channels, got {n}")));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += wasserstein_1d(&dists[i], &dists[j]);
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

fn swd_from_matrix(w: &[Vec<f64>]) -> f64 {
    let c = (w.len() - 1) / 2;
    (1..=c).map(|n| w[c - n][c + n]).sum::<f64>() / c as f64
}

fn fwd_from_matrix(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += w[i][j];
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Equal-width histogram over edges shared by every compared channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedHistograms {
    pub histograms: Vec<Histogram>,
    /// All values were equal, so a single unit-width bin was used.
    pub degenerate: bool,
}

pub fn shared_histogram(dists: &[ChannelDistribution], bins: usize) -> Result<SharedHistograms> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    if dists.is_empty() {
        return Err(Error::Config("no distributions to bin".into()));
    }
    let lo = dists.iter().map(|d| d.samples[0]).fold(f64::INFINITY, f64::min);
    let hi = dists
        .iter()
        .map(|d| *d.samples.last().expect("non-empty"))
        .fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        let edges = vec![lo - 0.5, lo + 0.5];
        return Ok(SharedHistograms {
            histograms: dists
                .iter()
                .map(|_| Histogram {
                    edges: edges.clone(),
                    mass: vec![1.0],
                })
                .collect(),
            degenerate: true,
        });
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|b| lo + width * b as f64).collect();
    edges.push(hi);
    let histograms = dists
        .iter()
        .map(|d| {
            let mut counts = vec![0u64; bins];
            for &v in &d.samples {
                let b = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
                counts[b.min(bins - 1)] += 1;
            }
            let n = d.count() as f64;
            Histogram {
                edges: edges.clone(),
                mass: counts.iter().map(|&c| c as f64 / n).collect(),
            }
        })
        .collect();
    Ok(SharedHistograms {
        histograms,
        degenerate: false,
    })
}

fn check_edges(a: &Histogram, b: &Histogram) -> Result<()> {
    if a.edges != b.edges || a.mass.len() != b.mass.len() {
        return Err(Error::Shape("histograms do not share bin edges".into()));
    }
    Ok(())
}

fn kl_term(p: f64, m: f64) -> f64 {
    if p > 0.0 {
        p * (p / m).ln()
    } else {
        0.0
    }
}

/// Jensen–Shannon divergence in nats, within `[0, ln 2]`.
pub fn js_divergence(ha: &Histogram, hb: &Histogram) -> Result<f64> {
    check_edges(ha, hb)?;
    let mut js = 0.0;
    for (&p, &q) in ha.mass.iter().zip(&hb.mass) {
        let m = 0.5 * (p + q);
        js += 0.5 * kl_term(p, m) + 0.5 * kl_term(q, m);
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Bhattacharyya distance `−ln Σ√(p·q)`. `None` when the supports are
/// disjoint and the distance is infinite.
pub fn bhattacharyya(ha: &Histogram, hb: &Histogram) -> Result<Option<f64>> {
    check_edges(ha, hb)?;
    let bc: f64 = ha.mass.iter().zip(&hb.mass).map(|(&p, &q)| (p * q).sqrt()).sum();
    if bc <= 0.0 {
        return Ok(None);
    }
    Ok(Some((-bc.ln()).max(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One distribution per channel over every pixel of every map.
    #[default]
    Pooled,
    /// Scores per map, then averaged.
    PerImage,
}

impl Pooling {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pooled" => Some(Pooling::Pooled),
            "per_image" => Some(Pooling::PerImage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub model: String,
    pub method: String,
    pub n_channels: usize,
    pub swd: f64,
    pub fwd: f64,
    pub pairwise_w: Vec<Vec<f64>>,
    pub js: Vec<Vec<f64>>,
    /// `null` marks a disjoint pair (infinite distance).
    pub bhattacharyya: Vec<Vec<Option<f64>>>,
    pub bins: usize,
    pub pooling: Pooling,
    pub maps: usize,
    pub flags: Vec<String>,
}

struct Matrices {
    w: Vec<Vec<f64>>,
    js: Vec<Vec<f64>>,
    bh: Vec<Vec<Option<f64>>>,
    degenerate: bool,
}

fn matrices(dists: &[ChannelDistribution], bins: usize, exec: Exec) -> Result<Matrices> {
    let n = dists.len();
    let hist = shared_histogram(dists, bins)?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let vals = exec.map(&pairs, |&(i, j)| -> Result<(f64, f64, Option<f64>)> {
        let (ha, hb) = (&hist.histograms[i], &hist.histograms[j]);
        Ok((
            wasserstein_1d(&dists[i], &dists[j]),
            js_divergence(ha, hb)?,
            bhattacharyya(ha, hb)?,
        ))
    });
    let mut w = vec![vec![0.0; n]; n];
    let mut js = vec![vec![0.0; n]; n];
    let mut bh = vec![vec![Some(0.0); n]; n];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        let (a, b, c) = v?;
        w[i][j] = a;
        w[j][i] = a;
        js[i][j] = b;
        js[j][i] = b;
        bh[i][j] = c;
        bh[j][i] = c;
    }
    Ok(Matrices {
        w,
        js,
        bh,
        degenerate: hist.degenerate,
    })
}

/// Build a report from per-map `[N, ...]` intensity buffers.
pub fn bias_report(
    model: &str,
    method: &str,
    n_channels: usize,
    maps: &[&[f32]],
    bins: usize,
    pooling: Pooling,
    exec: Exec,
) -> Result<BiasReport> {
    check_odd(n_channels)?;
    if maps.is_empty() {
        return Err(Error::Config("no saliency maps".into()));
    }
    let mut flags = Vec::new();
    let (swd_v, fwd_v, m) = match pooling {
        Pooling::Pooled => {
            let dists = pool_channels(n_channels, maps.iter().copied())?;
            let m = matrices(&dists, bins, exec)?;
            (swd_from_matrix(&m.w), fwd_from_matrix(&m.w), m)
        }
        Pooling::PerImage => {
            let per = exec.map(maps, |map| -> Result<Matrices> {
                let d = pool_channels(n_channels, std::iter::once(*map))?;
                matrices(&d, bins, Exec::Sequential)
            });
            let per = per.into_iter().collect::<Result<Vec<_>>>()?;
            let k = per.len() as f64;
            let n = n_channels;
            let mut w = vec![vec![0.0; n]; n];
            let mut js = vec![vec![0.0; n]; n];
            let mut bh = vec![vec![Some(0.0); n]; n];
            let (mut s, mut f) = (0.0, 0.0);
            for m in &per {
                s += swd_from_matrix(&m.w);
                f += fwd_from_matrix(&m.w);
                for i in 0..n {
                    for j in 0..n {
                        w[i][j] += m.w[i][j] / k;
                        js[i][j] += m.js[i][j] / k;
                        bh[i][j] = match (bh[i][j], m.bh[i][j]) {
                            (Some(acc), Some(v)) => Some(acc + v / k),
                            _ => None,
                        };
                    }
                }
            }
            let degenerate = per.iter().any(|m| m.degenerate);
            (s / k, f / k, Matrices { w, js, bh, degenerate })
        }
    };
    if m.degenerate {
        flags.push("degenerate_histogram_range".into());
    }
    if m.bh.iter().flatten().any(|v| v.is_none()) {
        flags.push("disjoint_histograms".into());
    }
    Ok(BiasReport {
        model: model.to_string(),
        method: method.to_string(),
        n_channels,
        swd: swd_v,
        fwd: fwd_v,
        pairwise_w: m.w,
        js: m.js,
        bhattacharyya: m.bh,
        bins,
        pooling,
        maps: maps.len(),
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(c: usize, v: &[f64]) -> ChannelDistribution {
        ChannelDistribution::new(c, v.to_vec()).unwrap()
    }

    fn hist(mass: &[f64]) -> Histogram {
        Histogram {
            edges: (0..=mass.len()).map(|i| i as f64).collect(),
            mass: mass.to_vec(),
        }
    }

    /// Minimum-cost perfect matching by enumerating permutations.
    fn brute_w1(a: &[f64], b: &[f64]) -> f64 {
        fn rec(a: &[f64], b: &mut Vec<f64>, k: usize, acc: f64, best: &mut f64) {
            if k == a.len() {
                *best = best.min(acc);
                return;
            }
            for i in k..b.len() {
                b.swap(k, i);
                rec(a, b, k + 1, acc + (a[k] - b[k]).abs(), best);
                b.swap(k, i);
            }
        }
        let mut best = f64::INFINITY;
        rec(a, &mut b.to_vec(), 0, 0.0, &mut best);
        best / a.len() as f64
    }

    #[test]
    fn w1_examples() {
        assert_eq!(wasserstein_1d(&dist(0, &[0.3, 0.1]), &dist(1, &[0.1, 0.3])), 0.0);
        assert_eq!(wasserstein_1d(&dist(0, &[0.0]), &dist(1, &[1.0])), 1.0);
        let a = dist(0, &[1.0, 2.0, 3.0]);
        let b = dist(1, &[2.0, 3.0, 4.0]);
        assert!((brute_w1(a.samples(), b.samples()) - 1.0).abs() < 1e-12);
        assert!((wasserstein_1d(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn w1_unequal_sizes() {
        // point mass at 0 vs uniform on {0, 1}: half the mass moves by 1
        let a = dist(0, &[0.0]);
        let b = dist(1, &[0.0, 1.0]);
        assert!((wasserstein_1d(&a, &b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn swd_and_fwd_examples() {
        let same = vec![dist(0, &[0.2, 0.4]), dist(1, &[0.2, 0.4]), dist(2, &[0.2, 0.4])];
        assert_eq!(swd(&same).unwrap(), 0.0);
        assert_eq!(fwd(&same).unwrap(), 0.0);

        let three = vec![dist(0, &[0.0]), dist(1, &[5.0, 7.0]), dist(2, &[1.0])];
        assert_eq!(swd(&three).unwrap(), 1.0);

        // outer pair 2 apart, inner pair identical: (2 + 0) / 2
        let five = vec![
            dist(0, &[0.0]),
            dist(1, &[3.0]),
            dist(2, &[9.0]),
            dist(3, &[3.0]),
            dist(4, &[2.0]),
        ];
        assert!((swd(&five).unwrap() - 1.0).abs() < 1e-15);

        let pm = vec![dist(0, &[0.0]), dist(1, &[0.0]), dist(2, &[1.0])];
        assert!((fwd(&pm).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        assert!(swd(&pm[..2]).is_err());
        assert!(fwd(&pm[..1]).is_err());
    }

    #[test]
    fn js_and_bhattacharyya_examples() {
        let a = hist(&[0.5, 0.5]);
        let b = hist(&[0.25, 0.75]);
        assert_eq!(js_divergence(&a, &a).unwrap(), 0.0);
        // direct evaluation: ½Σp ln(p/m) + ½Σq ln(q/m) with m = (3/8, 5/8)
        let want_js = 0.5 * (0.5 * (0.5f64 / 0.375).ln() + 0.5 * (0.5f64 / 0.625).ln())
            + 0.5 * (0.25 * (0.25f64 / 0.375).ln() + 0.75 * (0.75f64 / 0.625).ln());
        assert!((js_divergence(&a, &b).unwrap() - want_js).abs() < 1e-15);
        // 30-digit evaluation: 0.033822075568605230
        assert!((want_js - 0.033_822_075_568_605_23).abs() < 1e-15);
        let d = hist(&[1.0, 0.0]);
        let e = hist(&[0.0, 1.0]);
        assert!((js_divergence(&d, &e).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        assert_eq!(bhattacharyya(&a, &a).unwrap(), Some(0.0));
        let want_bh = -(0.125f64.sqrt() + 0.375f64.sqrt()).ln();
        assert!((bhattacharyya(&a, &b).unwrap().unwrap() - want_bh).abs() < 1e-15);
        // 30-digit evaluation: 0.034668232097536955
        assert!((want_bh - 0.034_668_232_097_536_96).abs() < 1e-15);
        assert_eq!(bhattacharyya(&d, &e).unwrap(), None);

        let other = Histogram {
            edges: vec![0.0, 0.5, 2.0],
            mass: vec![0.5, 0.5],
        };
        assert!(js_divergence(&a, &other).is_err());
        assert!(bhattacharyya(&a, &other).is_err());
    }

    #[test]
    fn pooling_counts_and_relabeling() {
        let map: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let d = pool_channels(3, [map.as_slice()]).unwrap();
        assert_eq!(d.iter().map(|d| d.count()).collect::<Vec<_>>(), vec![4, 4, 4]);

        let doubled = pool_channels(3, [map.as_slice(), map.as_slice()]).unwrap();
        assert_eq!(doubled[0].count(), 8);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert_eq!(wasserstein_1d(&d[i], &d[j]), wasserstein_1d(&doubled[i], &doubled[j]));
        }

        let mut rev = map.clone();
        rev.chunks_exact_mut(4).rev().zip(map.chunks_exact(4)).for_each(|(a, b)| a.copy_from_slice(b));
        let r = pool_channels(3, [rev.as_slice()]).unwrap();
        for c in 0..3 {
            assert_eq!(r[c].samples(), d[2 - c].samples());
        }
        assert!(pool_channels(3, std::iter::empty()).is_err());
    }

    #[test]
    fn histogram_normalization_and_degenerate_range() {
        let d = vec![dist(0, &[0.0, 0.5, 1.0]), dist(1, &[0.25, 0.25])];
        let h = shared_histogram(&d, 4).unwrap();
        assert!(!h.degenerate);
        for hh in &h.histograms {
            assert!((hh.mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(hh.edges.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(h.histograms[0].mass, vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]);

        let flat = vec![dist(0, &[0.2, 0.2]), dist(1, &[0.2])];
        let h = shared_histogram(&flat, 8).unwrap();
        assert!(h.degenerate);
        assert_eq!(h.histograms[0].mass, vec![1.0]);
        assert!(shared_histogram(&flat, 1).is_err());

        let twice = vec![dist(0, &[0.0, 0.0, 0.5, 0.5, 1.0, 1.0]), dist(1, &[0.25, 0.25, 0.25, 0.25])];
        let h2 = shared_histogram(&twice, 4).unwrap();
        assert_eq!(h2.histograms, shared_histogram(&d, 4).unwrap().histograms);
    }

    #[test]
    fn report_matrices_are_symmetric_with_zero_diagonal() {
        let a: Vec<f32> = (0..27).map(|i| (i % 7) as f32 * 0.1).collect();
        let b: Vec<f32> = (0..27).map(|i| (i % 5) as f32 * 0.3).collect();
        for pooling in [Pooling::Pooled, Pooling::PerImage] {
            let r = bias_report("m", "full_output", 3, &[&a, &b], 16, pooling, Exec::Sequential)
                .unwrap();
            for i in 0..3 {
                assert_eq!(r.pairwise_w[i][i], 0.0);
                assert_eq!(r.js[i][i], 0.0);
                assert_eq!(r.bhattacharyya[i][i], Some(0.0));
                for j in 0..3 {
                    assert_eq!(r.pairwise_w[i][j], r.pairwise_w[j][i]);
                    assert_eq!(r.js[i][j], r.js[j][i]);
                }
            }
            assert!(r.swd >= 0.0 && r.fwd >= 0.0);
            let par = bias_report("m", "full_output", 3, &[&a, &b], 16, pooling, Exec::Parallel)
                .unwrap();
            assert_eq!(r, par);
        }
    }

    fn arb_values(max: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..10.0, 1..max)
    }

    proptest! {
        #[test]
        fn quantile_w1_matches_brute_force(pairs in (1usize..=7).prop_flat_map(|n| (
            prop::collection::vec(0.0f64..5.0, n),
            prop::collection::vec(0.0f64..5.0, n),
        ))) {
            let (a, b) = pairs;
            let w = wasserstein_1d(&dist(0, &a), &dist(1, &b));
            prop_assert!((w - brute_w1(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn w1_metric_axioms(a in arb_values(20), b in arb_values(20), c in arb_values(20)) {
            let (a, b, c) = (dist(0, &a), dist(1, &b), dist(2, &c));
            prop_assert_eq!(wasserstein_1d(&a, &a), 0.0);
            prop_assert!((wasserstein_1d(&a, &b) - wasserstein_1d(&b, &a)).abs() < 1e-12);
            prop_assert!(wasserstein_1d(&a, &c) <= wasserstein_1d(&a, &b) + wasserstein_1d(&b, &c) + 1e-9);
        }

        #[test]
        fn swd_reversal_and_fwd_permutation(vals in prop::collection::vec(arb_values(10), 5)) {
            let d: Vec<_> = vals.iter().enumerate().map(|(i, v)| dist(i, v)).collect();
            let mut rev = d.clone();
            rev.reverse();
            prop_assert!((swd(&d).unwrap() - swd(&rev).unwrap()).abs() < 1e-12);
            let perm = vec![d[3].clone(), d[0].clone(), d[4].clone(), d[1].clone(), d[2].clone()];
            prop_assert!((fwd(&d).unwrap() - fwd(&perm).unwrap()).abs() < 1e-12);
            let f = fwd(&d).unwrap();
            prop_assert!(f >= 0.0);
            if f == 0.0 {
                prop_assert_eq!(swd(&d).unwrap(), 0.0);
            }
        }

        #[test]
        fn scale_equivariance(vals in prop::collection::vec(arb_values(10), 3), s in 0.01f64..100.0) {
            let d: Vec<_> = vals.iter().enumerate().map(|(i, v)| dist(i, v)).collect();
            let ds: Vec<_> = d.iter().map(|x| x.scaled(s)).collect();
            let tol = 1e-9 * (1.0 + s * 10.0);
            prop_assert!((swd(&ds).unwrap() - s * swd(&d).unwrap()).abs() < tol);
            prop_assert!((fwd(&ds).unwrap() - s * fwd(&d).unwrap()).abs() < tol);
        }

        #[test]
        fn histogram_distance_ranges(a in arb_values(30), b in arb_values(30)) {
            let h = shared_histogram(&[dist(0, &a), dist(1, &b)], 16).unwrap();
            let (ha, hb) = (&h.histograms[0], &h.histograms[1]);
            let js = js_divergence(ha, hb).unwrap();
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&js));
            prop_assert_eq!(js_divergence(ha, ha).unwrap(), 0.0);
            if let Some(bh) = bhattacharyya(ha, hb).unwrap() {
                prop_assert!(bh >= 0.0);
            }
            prop_assert!(bhattacharyya(ha, ha).unwrap().unwrap().abs() < 1e-12);
        }
    }
}
