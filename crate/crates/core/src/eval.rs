//! Evaluation: semicircle accuracy, angular error statistics, the
//! per-orientation error histogram, and Average Orientation Similarity.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::angle::{angular_error, decompose, orientation_similarity, wrap, Orientation};
use crate::error::EvalError;
use crate::nn::{Model, Prediction};
use crate::synth::{Dataset, Image};

pub const HISTOGRAM_BINS: usize = 36;

/// Mean squared angular error per ground-truth orientation bin. Bin `k`
/// covers `(edges[k], edges[k+1]]`; the first edge is `-π`, the last `π`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub bin_edges: Vec<f64>,
    /// Radians²; `None` for empty bins.
    pub mean_sq_error: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl ErrorHistogram {
    pub fn edges() -> Vec<f64> {
        let width = 2.0 * PI / HISTOGRAM_BINS as f64;
        (0..=HISTOGRAM_BINS)
            .map(|k| match k {
                0 => -PI,
                HISTOGRAM_BINS => PI,
                _ => -PI + k as f64 * width,
            })
            .collect()
    }

    /// Index of the bin holding `theta`.
    pub fn bin_of(edges: &[f64], theta: Orientation) -> usize {
        let t = theta.radians();
        let width = 2.0 * PI / HISTOGRAM_BINS as f64;
        let mut k = (((t + PI) / width).ceil() as usize).clamp(1, HISTOGRAM_BINS) - 1;
        while k > 0 && t <= edges[k] {
            k -= 1;
        }
        while k + 1 < HISTOGRAM_BINS && t > edges[k + 1] {
            k += 1;
        }
        k
    }

    /// Bins each `(truth, squared error)` pair by its ground-truth orientation.
    pub fn from_errors(samples: impl IntoIterator<Item = (Orientation, f64)>) -> Self {
        let bin_edges = Self::edges();
        let mut sums = vec![0.0; HISTOGRAM_BINS];
        let mut counts = vec![0usize; HISTOGRAM_BINS];
        for (theta, sq) in samples {
            let k = Self::bin_of(&bin_edges, theta);
            sums[k] += sq;
            counts[k] += 1;
        }
        let mean_sq_error = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        Self {
            bin_edges,
            mean_sq_error,
            counts,
        }
    }

    pub fn populated(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.mean_sq_error.iter().enumerate().filter_map(|(k, v)| v.map(|v| (k, v)))
    }

    /// Median over populated bins.
    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.populated().map(|(_, v)| v).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
    }

    /// The two bins touching `±π`: `(-π, -π + w]` and `(π - w, π]`.
    pub fn pi_adjacent(&self) -> [Option<f64>; 2] {
        [self.mean_sq_error[0], self.mean_sq_error[HISTOGRAM_BINS - 1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_count: usize,
    pub semicircle_accuracy: f64,
    /// Radians.
    pub mean_abs_angular_error: f64,
    /// Radians².
    pub mean_sq_angular_error: f64,
    /// Fraction of samples with `|error| > π/2`.
    pub confusion_mass: f64,
    /// Mean `(1 + cos Δ) / 2`.
    pub orientation_score: f64,
    pub histogram: ErrorHistogram,
}

/// Predicts every sample of `dataset` and scores the predictions.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if dataset.image_side() != model.input_side() {
        return Err(EvalError::SideMismatch {
            model: model.input_side(),
            data: dataset.image_side(),
        });
    }
    let images: Vec<&Image> = dataset.samples.iter().map(|s| &s.image).collect();
    let predictions = model.predict_many(&images, 64)?;
    let truths: Vec<Orientation> = dataset.samples.iter().map(|s| s.theta).collect();
    evaluate_predictions(&predictions, &truths)
}

/// Scores predictions against ground-truth orientations.
pub fn evaluate_predictions(predictions: &[Prediction], truths: &[Orientation]) -> Result<EvalReport, EvalError> {
    if truths.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            samples: truths.len(),
        });
    }
    let n = truths.len() as f64;
    let (mut correct, mut abs_sum, mut sq_sum, mut confused, mut score) = (0usize, 0.0, 0.0, 0usize, 0.0);
    let mut binned = Vec::with_capacity(truths.len());
    for (p, &t) in predictions.iter().zip(truths) {
        if p.class_index == decompose(t).class_index {
            correct += 1;
        }
        let e = angular_error(p.orientation, t);
        let a = e.abs();
        abs_sum += a;
        sq_sum += a * a;
        if a > PI / 2.0 {
            confused += 1;
        }
        score += orientation_similarity(e);
        binned.push((t, a * a));
    }
    Ok(EvalReport {
        sample_count: truths.len(),
        semicircle_accuracy: correct as f64 / n,
        mean_abs_angular_error: abs_sum / n,
        mean_sq_angular_error: sq_sum / n,
        confusion_mass: confused as f64 / n,
        orientation_score: score / n,
        histogram: ErrorHistogram::from_errors(binned),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            other => Err(EvalError::Report(format!("unknown report format `{other}`"))),
        }
    }
}

/// Rounds to 12 significant digits.
pub fn round12(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn fmt12(x: f64) -> String {
    round12(x).to_string()
}

impl EvalReport {
    /// Copy with every real rounded to 12 significant digits, as emitted.
    pub fn rounded(&self) -> Self {
        let h = &self.histogram;
        Self {
            sample_count: self.sample_count,
            semicircle_accuracy: round12(self.semicircle_accuracy),
            mean_abs_angular_error: round12(self.mean_abs_angular_error),
            mean_sq_angular_error: round12(self.mean_sq_angular_error),
            confusion_mass: round12(self.confusion_mass),
            orientation_score: round12(self.orientation_score),
            histogram: ErrorHistogram {
                bin_edges: h.bin_edges.iter().map(|&e| round12(e)).collect(),
                mean_sq_error: h.mean_sq_error.iter().map(|v| v.map(round12)).collect(),
                counts: h.counts.clone(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.rounded()).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let report: Self = serde_json::from_str(text).map_err(|e| EvalError::Report(e.to_string()))?;
        let h = &report.histogram;
        if h.bin_edges.len() != h.counts.len() + 1 || h.counts.len() != h.mean_sq_error.len() {
            return Err(EvalError::Report("histogram arrays have inconsistent lengths".into()));
        }
        Ok(report)
    }

    /// One row per histogram bin; empty bins read `NA`.
    pub fn to_csv(&self) -> String {
        let h = &self.histogram;
        let mut out = String::from("bin,lower,upper,count,mean_sq_error\n");
        for k in 0..h.counts.len() {
            let mse = h.mean_sq_error[k].map_or_else(|| "NA".to_string(), fmt12);
            let _ = writeln!(
                out,
                "{k},{},{},{},{mse}",
                fmt12(h.bin_edges[k]),
                fmt12(h.bin_edges[k + 1]),
                h.counts[k]
            );
        }
        out
    }

    /// Bar chart of the histogram: one `rect` per populated bin, x axis in
    /// radians.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 360.0;
        const LEFT: f64 = 60.0;
        const RIGHT: f64 = 20.0;
        const TOP: f64 = 20.0;
        const BOTTOM: f64 = 50.0;
        let h = &self.histogram;
        let plot_w = W - LEFT - RIGHT;
        let plot_h = H - TOP - BOTTOM;
        let ymax = h.populated().map(|(_, v)| v).fold(0.0f64, f64::max).max(PI * PI);
        let x_of = |theta: f64| LEFT + (theta + PI) / (2.0 * PI) * plot_w;
        let y_of = |v: f64| TOP + plot_h * (1.0 - v / ymax);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#,
            y0 = TOP + plot_h,
            x1 = LEFT + plot_w
        );
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{y0}" stroke="black"/>"#,
            y0 = TOP + plot_h
        );
        for (k, v) in h.populated() {
            let x0 = x_of(h.bin_edges[k]);
            let x1 = x_of(h.bin_edges[k + 1]);
            let y = y_of(v);
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4477aa"><title>{}</title></rect>"##,
                x0,
                y,
                (x1 - x0 - 1.0).max(0.5),
                TOP + plot_h - y,
                fmt12(v)
            );
        }
        for (label, theta) in [("−π", -PI), ("−π/2", -PI / 2.0), ("0", 0.0), ("π/2", PI / 2.0), ("π", PI)] {
            let x = x_of(theta);
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#,
                TOP + plot_h + 18.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">ground-truth orientation (rad)</text>"#,
            LEFT + plot_w / 2.0,
            H - 8.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">mean squared error (rad²)</text>"#,
            TOP + plot_h / 2.0,
            TOP + plot_h / 2.0
        );
        for tick in [0.0, ymax / 2.0, ymax] {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.2}</text>"#,
                LEFT - 6.0,
                y_of(tick) + 4.0,
                tick
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Svg => self.to_svg(),
        }
    }
}

/// Writes `report` to `path` in `format`.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    fs::write(path, report.render(format)).map_err(|e| EvalError::io(path, e))
}

/// Axis-aligned 2D box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        (self.right - self.left) * (self.bottom - self.top)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let w = self.right.min(other.right) - self.left.max(other.left);
        let h = self.bottom.min(other.bottom) - self.top.max(other.top);
        if w <= 0.0 || h <= 0.0 {
            return 0.0;
        }
        let inter = w * h;
        inter / (self.area() + other.area() - inter)
    }

    fn is_valid(&self) -> bool {
        [self.left, self.top, self.right, self.bottom].iter().all(|v| v.is_finite())
            && self.right > self.left
            && self.bottom > self.top
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AosDetection {
    pub bbox: BoundingBox,
    pub score: f64,
    /// Radians.
    pub orientation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AosGroundTruth {
    pub bbox: BoundingBox,
    pub orientation: f64,
    pub difficulty: Option<Difficulty>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AosImage {
    pub predictions: Vec<AosDetection>,
    pub ground_truths: Vec<AosGroundTruth>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AosInput {
    pub images: Vec<AosImage>,
}

impl AosInput {
    fn validate(&self) -> Result<(), EvalError> {
        for (i, img) in self.images.iter().enumerate() {
            for (j, p) in img.predictions.iter().enumerate() {
                if !p.score.is_finite() || !p.orientation.is_finite() {
                    return Err(EvalError::InvalidInput(format!("image {i} prediction {j}: non-finite value")));
                }
                if !p.bbox.is_valid() {
                    return Err(EvalError::InvalidInput(format!("image {i} prediction {j}: box has no area")));
                }
            }
            for (j, g) in img.ground_truths.iter().enumerate() {
                if !g.orientation.is_finite() {
                    return Err(EvalError::InvalidInput(format!("image {i} ground truth {j}: non-finite orientation")));
                }
                if !g.bbox.is_valid() {
                    return Err(EvalError::InvalidInput(format!("image {i} ground truth {j}: box has no area")));
                }
            }
        }
        Ok(())
    }
}

/// One point of the similarity-weighted precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub score: f64,
    pub recall: f64,
    /// Summed similarity of true positives over detections so far.
    pub similarity_precision: f64,
}

/// Greedy matching in descending score order; each prediction takes the
/// unmatched same-image ground truth with the highest IoU at or above the
/// threshold. Returns the curve after each prediction.
pub fn aos_curve(input: &AosInput, iou_threshold: f64) -> Result<Vec<CurvePoint>, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(EvalError::InvalidThreshold(iou_threshold));
    }
    input.validate()?;
    let total_gt: usize = input.images.iter().map(|i| i.ground_truths.len()).sum();
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut order: Vec<(usize, usize)> = input
        .images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| (0..img.predictions.len()).map(move |j| (i, j)))
        .collect();
    order.sort_by(|a, b| {
        let sa = input.images[a.0].predictions[a.1].score;
        let sb = input.images[b.0].predictions[b.1].score;
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let mut taken: Vec<Vec<bool>> = input.images.iter().map(|i| vec![false; i.ground_truths.len()]).collect();
    let (mut tp, mut sim) = (0usize, 0.0);
    let mut curve = Vec::with_capacity(order.len());
    for (k, &(i, j)) in order.iter().enumerate() {
        let img = &input.images[i];
        let p = &img.predictions[j];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in img.ground_truths.iter().enumerate() {
            if taken[i][g] {
                continue;
            }
            let iou = p.bbox.iou(&gt.bbox);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[i][g] = true;
            tp += 1;
            let delta = wrap(p.orientation - img.ground_truths[g].orientation).expect("validated finite");
            sim += (1.0 + delta.radians().cos()) / 2.0;
        }
        curve.push(CurvePoint {
            score: p.score,
            recall: tp as f64 / total_gt as f64,
            similarity_precision: sim / (k + 1) as f64,
        });
    }
    Ok(curve)
}

/// Average Orientation Similarity with `recall_points` evenly spaced recall
/// levels in `[0, 1]` (11 for the benchmark protocol). Each level takes the
/// best similarity-weighted precision at recall at or above it.
pub fn aos(input: &AosInput, iou_threshold: f64, recall_points: usize) -> Result<f64, EvalError> {
    if recall_points < 2 {
        return Err(EvalError::InvalidInput(format!("need at least 2 recall points, got {recall_points}")));
    }
    let curve = aos_curve(input, iou_threshold)?;
    let steps = (recall_points - 1) as f64;
    let total: f64 = (0..recall_points)
        .map(|r| {
            let level = r as f64 / steps;
            curve
                .iter()
                .filter(|c| c.recall >= level)
                .map(|c| c.similarity_precision)
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / recall_points as f64)
}
