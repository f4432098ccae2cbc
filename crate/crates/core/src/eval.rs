//! Frozen-feature linear probes, accuracy and comparison reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataio::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::imgops::{IeKind, Image};
use crate::nn::{dgemm, Tape};
use crate::trainer::{images_to_tensor, EpochMetrics, Pretrained, ProbePoint, TwoHeadModel};

/// Images per eval-mode forward pass during extraction.
const EXTRACT_CHUNK: usize = 256;

/// Row-major `rows x cols` features taken at one probe point.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub probe_point: ProbePoint,
}

impl FeatureMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        values: Vec<f32>,
        probe_point: ProbePoint,
    ) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} feature matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            values,
            probe_point,
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Runs the frozen model in eval mode and global-average-pools the activations
/// at `point` into one vector per image.
pub fn extract_features(
    model: &TwoHeadModel,
    norm: &ChannelStats,
    images: &[Image],
    point: ProbePoint,
) -> Result<FeatureMatrix> {
    if images.is_empty() {
        return Err(Error::Empty("extract_features"));
    }
    let mut values = Vec::with_capacity(images.len() * point.dim());
    for chunk in images.chunks(EXTRACT_CHUNK) {
        let input = images_to_tensor(chunk, norm)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, input, false)?;
        let var = match point {
            ProbePoint::Pool1 => tape.global_avg_pool(fwd.pool1)?,
            ProbePoint::Pool2 => tape.global_avg_pool(fwd.pool2)?,
            ProbePoint::Gap => fwd.features,
        };
        values.extend_from_slice(tape.value(var).data());
    }
    FeatureMatrix::new(images.len(), point.dim(), values, point)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub l2: f64,
    pub iters: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-4,
            iters: 500,
            lr: 0.1,
        }
    }
}

/// Multinomial logistic regression on z-scored features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub classes: usize,
    pub features: usize,
    /// `classes x features`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Objective value after every accepted iteration, starting with the initial one.
    pub loss_history: Vec<f64>,
}

fn standardize(x: &FeatureMatrix, mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.values
        .chunks_exact(x.cols)
        .flat_map(|row| {
            row.iter()
                .zip(mean)
                .zip(std)
                .map(|((&v, m), s)| (v as f64 - m) / s)
        })
        .collect()
}

fn column_stats(x: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows as f64;
    let mut mean = vec![0f64; x.cols];
    for row in x.values.chunks_exact(x.cols) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; x.cols];
    for row in x.values.chunks_exact(x.cols) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// `z . W^T + b`, `n x classes`.
fn logits(z: &[f64], n: usize, d: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let k = bias.len();
    let mut out: Vec<f64> = (0..n).flat_map(|_| bias.iter().copied()).collect();
    dgemm(n, d, k, 1.0, z, false, weight, true, 1.0, &mut out);
    out
}

/// Mean cross-entropy plus `l2 / 2 * |W|^2`, and `(softmax - one_hot) / n`.
fn objective(
    scores: &[f64],
    labels: &[usize],
    k: usize,
    weight: &[f64],
    l2: f64,
) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0f64; scores.len()];
    let mut total = 0f64;
    for ((row, g), &y) in scores
        .chunks_exact(k)
        .zip(grad.chunks_exact_mut(k))
        .zip(labels)
    {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        for (j, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            *gv = ((v - lse).exp() - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let penalty = 0.5 * l2 * weight.iter().map(|w| w * w).sum::<f64>();
    (total / n as f64 + penalty, grad)
}

/// Full-batch gradient descent from zero weights. A step that would raise
/// the objective is retried with half the step size, so the recorded loss
/// never increases.
pub fn fit_linear_probe(
    train: &FeatureMatrix,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    if labels.len() != train.rows {
        return Err(Error::Shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            train.rows
        )));
    }
    if train.rows == 0 {
        return Err(Error::Empty("fit_linear_probe"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::InvalidArgument(
            "linear probe needs at least two classes in the training labels".into(),
        ));
    }
    if !(cfg.lr > 0.0 && cfg.l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bad probe settings {cfg:?}"
        )));
    }
    let (n, d, k) = (train.rows, train.cols, classes);
    let (feature_mean, feature_std) = column_stats(train);
    let z = standardize(train, &feature_mean, &feature_std);
    let mut weight = vec![0f64; k * d];
    let mut bias = vec![0f64; k];
    let (mut loss, mut g) = objective(
        &logits(&z, n, d, &weight, &bias),
        labels,
        k,
        &weight,
        cfg.l2,
    );
    let mut loss_history = vec![loss];
    let mut lr = cfg.lr;
    for _ in 0..cfg.iters {
        let mut gw = weight.iter().map(|w| cfg.l2 * w).collect::<Vec<_>>();
        dgemm(k, n, d, 1.0, &g, true, &z, false, 1.0, &mut gw);
        let mut gb = vec![0f64; k];
        for row in g.chunks_exact(k) {
            for (b, v) in gb.iter_mut().zip(row) {
                *b += v;
            }
        }
        loop {
            let w_next: Vec<f64> = weight.iter().zip(&gw).map(|(w, g)| w - lr * g).collect();
            let b_next: Vec<f64> = bias.iter().zip(&gb).map(|(b, g)| b - lr * g).collect();
            let (l_next, g_next) = objective(
                &logits(&z, n, d, &w_next, &b_next),
                labels,
                k,
                &w_next,
                cfg.l2,
            );
            if l_next <= loss {
                weight = w_next;
                bias = b_next;
                loss = l_next;
                g = g_next;
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
        loss_history.push(loss);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("linear probe loss".into()));
    }
    Ok(ProbeModel {
        classes,
        features: d,
        weight,
        bias,
        feature_mean,
        feature_std,
        loss_history,
    })
}

impl ProbeModel {
    /// Class scores, `rows x classes`.
    pub fn scores(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.cols != self.features {
            return Err(Error::Shape(format!(
                "probe expects {} features, got {}",
                self.features, x.cols
            )));
        }
        let z = standardize(x, &self.feature_mean, &self.feature_std);
        Ok(logits(&z, x.rows, x.cols, &self.weight, &self.bias))
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.scores(x)?, self.classes))
    }

    pub fn accuracy(&self, x: &FeatureMatrix, labels: &[usize]) -> Result<f64> {
        top1_accuracy(&self.scores(x)?, self.classes, labels)
    }
}

/// Index of the largest score per row; ties go to the lowest index.
pub fn argmax_rows(scores: &[f64], classes: usize) -> Vec<usize> {
    scores
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
        })
        .collect()
}

/// Fraction of rows of `scores` (`n x classes`) whose argmax equals the label.
pub fn top1_accuracy(scores: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    if classes == 0 || scores.len() != labels.len() * classes {
        return Err(Error::Shape(format!(
            "{} scores for {} labels over {classes} classes",
            scores.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("top1_accuracy"));
    }
    let hits = argmax_rows(scores, classes)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fits a probe on `train` features and returns its top-1 accuracy on `test`.
pub fn probe_accuracy(
    pre: &Pretrained,
    train: &Dataset,
    test: &Dataset,
    point: ProbePoint,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let classes = train.class_count().max(test.class_count());
    let xtr = extract_features(&pre.model, &pre.norm, train.images(), point)?;
    let probe = fit_linear_probe(&xtr, train.labels(), classes, cfg)?;
    let xte = extract_features(&pre.model, &pre.norm, test.images(), point)?;
    probe.accuracy(&xte, test.labels())
}

/// One pretrain-plus-probe result.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub ie_kind: IeKind,
    pub seed: u64,
    pub probe_point: ProbePoint,
    pub top1: f64,
    pub curve: Vec<EpochMetrics>,
}

/// Mean and population standard deviation of one method's runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub method: String,
    pub ie_kind: IeKind,
    pub probe_point: ProbePoint,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Groups runs by method, enhancement and probe point in first-seen order.
pub fn summarize(runs: &[RunRecord]) -> Vec<Summary> {
    let mut order: Vec<(String, IeKind, ProbePoint)> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in runs {
        let key = (r.method.clone(), r.ie_kind, r.probe_point);
        let idx = order.iter().position(|k| *k == key).unwrap_or_else(|| {
            order.push(key);
            order.len() - 1
        });
        groups.entry(idx).or_default().push(r.top1);
    }
    order
        .into_iter()
        .enumerate()
        .map(|(idx, (method, ie_kind, probe_point))| {
            let xs = &groups[&idx];
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            Summary {
                method,
                ie_kind,
                probe_point,
                runs: xs.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub const REPORT_HEADER: &str = "method,ie_kind,seed,probe_point,top1";
pub const SUMMARY_HEADER: &str = "method,ie_kind,probe_point,runs,mean,std";

pub fn report_csv(runs: &[RunRecord]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.method, r.ie_kind, r.seed, r.probe_point, r.top1
        );
    }
    for s in summarize(runs) {
        for (tag, v) in [("mean", s.mean), ("std", s.std)] {
            let _ = writeln!(
                out,
                "{},{},{tag},{},{v}",
                s.method, s.ie_kind, s.probe_point
            );
        }
    }
    out
}

pub fn summary_csv(summaries: &[Summary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.method, s.ie_kind, s.probe_point, s.runs, s.mean, s.std
        );
    }
    out
}

/// Parses the per-run rows of a report CSV, skipping summary rows.
pub fn parse_report_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(REPORT_HEADER) {
        return Err(Error::InvalidArgument("report header mismatch".into()));
    }
    let mut out = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::InvalidArgument(format!("bad report row {line:?}"));
        if f.len() != 5 {
            return Err(bad());
        }
        if f[2] == "mean" || f[2] == "std" {
            continue;
        }
        out.push(RunRecord {
            method: f[0].to_string(),
            ie_kind: f[1].parse().map_err(|_| bad())?,
            seed: f[2].parse().map_err(|_| bad())?,
            probe_point: f[3].parse().map_err(|_| bad())?,
            top1: f[4].parse().map_err(|_| bad())?,
            curve: Vec::new(),
        });
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// Validation accuracy used for a run's curve: the rotation head when it was trained.
fn curve_value(m: &EpochMetrics) -> f64 {
    if m.val_acc_r.is_finite() {
        m.val_acc_r
    } else {
        m.val_acc_i
    }
}

/// Line chart of per-epoch validation accuracy, one polyline per run.
pub fn curves_svg(runs: &[RunRecord]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 160.0, 20.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_epoch = runs
        .iter()
        .flat_map(|r| r.curve.iter().map(|m| m.epoch))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let x = |e: f64| left + pw * e / max_epoch;
    let y = |a: f64| top + ph * (1.0 - a.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + ph
    );
    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{a:.2}</text>"#,
            left - 6.0,
            y(a) + 4.0
        );
    }
    let ticks = max_epoch as usize;
    let stride = ticks.div_ceil(10).max(1);
    for e in (0..=ticks).step_by(stride) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{e}</text>"#,
            x(e as f64),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, r) in runs.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let label = xml_escape(&format!("{} seed {}", r.method, r.seed));
        let points: Vec<String> = r
            .curve
            .iter()
            .filter(|m| curve_value(m).is_finite())
            .map(|m| format!("{:.2},{:.2}", x(m.epoch as f64), y(curve_value(m))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"><title>{label}</title></polyline>"#,
            points.join(" ")
        );
        let ly = top + 14.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{colour}">{label}</text>"#,
            left + pw + 10.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the report CSV to `path` and the validation-curve chart beside it
/// with an `.svg` extension.
pub fn emit_report(runs: &[RunRecord], path: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Empty("emit_report"));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, report_csv(runs)).map_err(|e| Error::io(path, e))?;
    let svg = path.with_extension("svg");
    fs::write(&svg, curves_svg(runs)).map_err(|e| Error::io(&svg, e))
}
