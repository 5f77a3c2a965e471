//! CSV tables, JSON documents and SVG plots for audit results.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so equal
//! inputs always produce byte-identical files.

use std::fmt::Write as _;

use serde::Serialize;

use crate::bias::{pool_channels, BiasReport};
use crate::error::{Error, Result};
use crate::seg_metrics::{QualityMetric, QualityReport};

/// Label used in the `se_basis` column.
pub const SE_BASIS: &str = "per_image";

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v > 0.0 {
        "inf".into()
    } else {
        "nan".into()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per column, the rows holding the extreme value. Ties mark every row.
fn extremes(columns: &[(String, Vec<f64>)], lower_is_better: bool, rows: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let mut best = vec![Vec::new(); rows];
    let mut worst = vec![Vec::new(); rows];
    if rows < 2 {
        return (best, worst);
    }
    for (name, vals) in columns {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            continue;
        }
        let (b, w) = if lower_is_better { (lo, hi) } else { (hi, lo) };
        for (r, &v) in vals.iter().enumerate() {
            if v == b {
                best[r].push(name.clone());
            }
            if v == w {
                worst[r].push(name.clone());
            }
        }
    }
    (best, worst)
}

/// One row per pretrain strategy with `<method>_swd, <method>_fwd` columns,
/// then `best`/`worst` naming the columns where the row has the lowest or
/// highest bias. Methods follow the order of the first row.
pub fn bias_table_csv(rows: &[(String, Vec<BiasReport>)]) -> Result<String> {
    let methods: Vec<String> = rows
        .first()
        .map(|(_, r)| r.iter().map(|b| b.method.clone()).collect())
        .unwrap_or_default();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for m in &methods {
        for (suffix, pick) in [("swd", 0), ("fwd", 1)] {
            let vals = rows
                .iter()
                .map(|(name, reports)| {
                    reports
                        .iter()
                        .find(|b| &b.method == m)
                        .map(|b| if pick == 0 { b.swd } else { b.fwd })
                        .ok_or_else(|| Error::Config(format!("row {name} lacks method {m}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            columns.push((format!("{m}_{suffix}"), vals));
        }
    }
    let (best, worst) = extremes(&columns, true, rows.len());
    let mut out = String::from("pretrain");
    for (name, _) in &columns {
        write!(out, ",{name}").unwrap();
    }
    out.push_str(",best,worst\n");
    for (r, (name, _)) in rows.iter().enumerate() {
        out.push_str(&csv_field(name));
        for (_, vals) in &columns {
            write!(out, ",{}", fmt_f(vals[r])).unwrap();
        }
        writeln!(out, ",{},{}", best[r].join(";"), worst[r].join(";")).unwrap();
    }
    Ok(out)
}

/// Long-form pairwise matrices: `pretrain,method,metric,i,j,value` for every
/// unordered pair `i < j`. A disjoint Bhattacharyya pair is written as `inf`.
pub fn pairwise_csv(rows: &[(String, Vec<BiasReport>)]) -> String {
    let mut out = String::from("pretrain,method,metric,i,j,value\n");
    for (name, reports) in rows {
        for b in reports {
            let n = b.n_channels;
            for i in 0..n {
                for j in i + 1..n {
                    let entries = [
                        ("wasserstein", fmt_f(b.pairwise_w[i][j])),
                        ("js", fmt_f(b.js[i][j])),
                        ("bhattacharyya", b.bhattacharyya[i][j].map_or("inf".into(), fmt_f)),
                    ];
                    for (metric, v) in entries {
                        writeln!(out, "{},{},{metric},{i},{j},{v}", csv_field(name), csv_field(&b.method)).unwrap();
                    }
                }
            }
        }
    }
    out
}

pub const QUALITY_HEADER: &str = "pretrain,dice,dice_se,iou,iou_se,precision,precision_se,recall,recall_se,accuracy,accuracy_se,n_images,se_basis,best,worst";

/// One row per pretrain strategy: mean and SE of each quality metric.
/// `best`/`worst` name the metrics where the row is highest or lowest.
pub fn quality_csv(rows: &[(String, QualityReport)]) -> String {
    let columns: Vec<(String, Vec<f64>)> = QualityMetric::ALL
        .iter()
        .map(|&m| (m.name().to_string(), rows.iter().map(|(_, q)| q.get(m).mean).collect()))
        .collect();
    let (best, worst) = extremes(&columns, false, rows.len());
    let mut out = format!("{QUALITY_HEADER}\n");
    for (r, (name, q)) in rows.iter().enumerate() {
        out.push_str(&csv_field(name));
        for m in QualityMetric::ALL {
            let s = q.get(m);
            write!(out, ",{},{}", fmt_f(s.mean), fmt_f(s.se)).unwrap();
        }
        writeln!(
            out,
            ",{},{SE_BASIS},{},{}",
            q.dice.per_image.len(),
            best[r].join(";"),
            worst[r].join(";")
        )
        .unwrap();
    }
    out
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize") + "\n"
}

const PALETTE: [&str; 7] = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];

fn channel_color(c: usize, n: usize) -> &'static str {
    if n == 3 {
        ["#d62728", "#2ca02c", "#1f77b4"][c]
    } else {
        PALETTE[c % PALETTE.len()]
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Map every value to its mid-rank in the pooled sample, giving a flat
/// display histogram.
pub fn equalize(values: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    values
        .iter()
        .map(|v| {
            let lo = sorted.partition_point(|x| x < v) as f64;
            let hi = sorted.partition_point(|x| x <= v) as f64;
            (lo + hi) / (2.0 * n)
        })
        .collect()
}

struct Plot {
    title: String,
    x_label: String,
    y_label: String,
    series: Vec<(String, &'static str, Vec<f64>)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn render(p: &Plot) -> String {
    let len = p.series.iter().map(|s| s.2.len()).max().unwrap_or(0).max(2);
    let ymax = p
        .series
        .iter()
        .flat_map(|s| s.2.iter().copied())
        .fold(0.0f64, f64::max);
    let ymax = if ymax > 0.0 { ymax } else { 1.0 };
    let sx = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (len - 1) as f64;
    let sy = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * v / ymax;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        W / 2.0,
        xml_escape(&p.title)
    )
    .unwrap();
    writeln!(
        out,
        r#"<path d="M{MARGIN},{MARGIN} V{} H{}" fill="none" stroke="black"/>"#,
        H - MARGIN,
        W - MARGIN
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        W / 2.0,
        H - 16.0,
        xml_escape(&p.x_label)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml_escape(&p.y_label)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#,
        MARGIN - 4.0,
        MARGIN + 4.0,
        fmt_axis(ymax)
    )
    .unwrap();
    for (k, (name, color, vals)) in p.series.iter().enumerate() {
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", sx(i), sy(v)))
            .collect();
        writeln!(
            out,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        let ly = MARGIN + 14.0 * k as f64;
        writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{color}" font-family="sans-serif" font-size="12">{}</text>"#,
            W - MARGIN - 80.0,
            xml_escape(name)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

fn fmt_axis(v: f64) -> String {
    format!("{v:.3e}")
}

fn check_maps(maps: &[&[f32]], n: usize, h: usize, w: usize) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::Config("no saliency maps to plot".into()));
    }
    if let Some(bad) = maps.iter().find(|m| m.len() != n * h * w) {
        return Err(Error::Shape(format!("map of {} values is not {n}x{h}x{w}", bad.len())));
    }
    Ok(())
}

/// One curve per channel: the map averaged over samples and rows, as a
/// function of the column. With `equalize`, intensities are first replaced
/// by their pooled rank.
pub fn saliency_profile_svg(title: &str, maps: &[&[f32]], n: usize, h: usize, w: usize, equalize_display: bool) -> Result<String> {
    check_maps(maps, n, h, w)?;
    let pooled: Vec<f64> = maps.iter().flat_map(|m| m.iter().map(|&v| v as f64)).collect();
    let values = if equalize_display { equalize(&pooled) } else { pooled };
    let per_map = n * h * w;
    let mut series = Vec::with_capacity(n);
    for c in 0..n {
        let mut curve = vec![0.0f64; w];
        for k in 0..maps.len() {
            for y in 0..h {
                for x in 0..w {
                    curve[x] += values[k * per_map + (c * h + y) * w + x];
                }
            }
        }
        let denom = (maps.len() * h) as f64;
        curve.iter_mut().for_each(|v| *v /= denom);
        series.push((format!("channel {c}"), channel_color(c, n), curve));
    }
    Ok(render(&Plot {
        title: title.into(),
        x_label: "column".into(),
        y_label: if equalize_display { "mean equalized saliency" } else { "mean saliency" }.into(),
        series,
    }))
}

/// One histogram curve per channel over shared equal-width bins.
pub fn saliency_histogram_svg(title: &str, maps: &[&[f32]], n: usize, bins: usize, equalize_display: bool) -> Result<String> {
    if bins < 2 {
        return Err(Error::Config("need at least 2 bins".into()));
    }
    let dists = pool_channels(n, maps.iter().copied())?;
    let count = dists[0].count();
    let pooled: Vec<f64> = dists.iter().flat_map(|d| d.samples().iter().copied()).collect();
    let values = if equalize_display { equalize(&pooled) } else { pooled };
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let series = (0..n)
        .map(|c| {
            let mut h = vec![0.0f64; bins];
            for &v in &values[c * count..(c + 1) * count] {
                let b = (((v - lo) / span) * bins as f64).floor() as usize;
                h[b.min(bins - 1)] += 1.0 / count as f64;
            }
            (format!("channel {c}"), channel_color(c, n), h)
        })
        .collect();
    Ok(render(&Plot {
        title: title.into(),
        x_label: if equalize_display { "equalized intensity bin" } else { "intensity bin" }.into(),
        y_label: "fraction of pixels".into(),
        series,
    }))
}

/// Bars of SWd and FWd per method for one report set.
pub fn bias_bars_svg(title: &str, reports: &[BiasReport]) -> String {
    let swd: Vec<f64> = reports.iter().map(|r| r.swd).collect();
    let fwd: Vec<f64> = reports.iter().map(|r| r.fwd).collect();
    let ymax = swd.iter().chain(&fwd).copied().fold(0.0f64, f64::max);
    let ymax = if ymax > 0.0 { ymax } else { 1.0 };
    let slot = (W - 2.0 * MARGIN) / reports.len().max(1) as f64;
    let bar = slot * 0.35;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    )
    .unwrap();
    for (i, r) in reports.iter().enumerate() {
        let x0 = MARGIN + slot * i as f64 + slot * 0.15;
        for (k, (v, color)) in [(r.swd, "#444444"), (r.fwd, "#aaaaaa")].into_iter().enumerate() {
            let hgt = (H - 2.0 * MARGIN) * v / ymax;
            writeln!(
                out,
                r#"<rect class="bar" x="{:.2}" y="{:.2}" width="{bar:.2}" height="{hgt:.2}" fill="{color}"/>"#,
                x0 + bar * k as f64,
                H - MARGIN - hgt
            )
            .unwrap();
        }
        writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
            x0 + bar,
            H - MARGIN + 14.0,
            xml_escape(&r.method)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}
