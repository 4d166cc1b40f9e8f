//! Full-reference image quality (PSNR, SSIM), segmentation overlap scores,
//! throughput timing and the evaluation report they feed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    if max_val.is_nan() || max_val <= 0.0 {
        return Err(Error::InvalidArgument("psnr max_val must be positive".into()));
    }
    if a.is_empty() {
        return Err(Error::Shape("psnr of empty images".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!(
            "expected an image of shape (H, W) or (C, H, W), got {:?}",
            t.shape()
        ))),
    }
}

/// Mean SSIM over an 11x11 Gaussian window (sigma 1.5), averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    if max_val.is_nan() || max_val <= 0.0 {
        return Err(Error::InvalidArgument("ssim max_val must be positive".into()));
    }
    let (c, h, w) = planes(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let taps = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * plane..(ch + 1) * plane];
        let y = &b.data()[ch * plane..(ch + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let mx = filter_valid(x, h, w, &taps);
        let my = filter_valid(y, h, w, &taps);
        let exx = filter_valid(&xx, h, w, &taps);
        let eyy = filter_valid(&yy, h, w, &taps);
        let exy = filter_valid(&xy, h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cov = exy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Pixel counts of a binary prediction against binary ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

pub fn confusion_counts(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    pred.ensure_same_shape(gt, "confusion_counts")?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            _ if !(p == 0.0 || p == 1.0) || !(g == 0.0 || g == 1.0) => {
                return Err(Error::InvalidArgument(format!(
                    "masks must be binary, found {p} / {g}"
                )))
            }
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub jaccard: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    /// Set when some ratio was 0/0 and reported as 1.0 by convention.
    pub degenerate: bool,
}

impl SegmentationScores {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("jaccard", self.jaccard),
            ("f1", self.f1),
            ("recall", self.recall),
            ("precision", self.precision),
            ("accuracy", self.accuracy),
        ]
    }
}

pub fn segmentation_scores(c: &ConfusionCounts) -> Result<SegmentationScores> {
    if c.total() == 0 {
        return Err(Error::InvalidArgument("no pixels to score".into()));
    }
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let jaccard = ratio(c.tp, c.tp + c.fp + c.fn_);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let accuracy = ratio(c.tp + c.tn, c.total());
    if degenerate {
        log::warn!("segmentation scores hit 0/0; reported as 1.0 by convention");
    }
    Ok(SegmentationScores {
        jaccard,
        f1,
        recall,
        precision,
        accuracy,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub images: usize,
    pub seconds_per_image: f64,
    pub images_per_second: f64,
}

impl Timing {
    fn from_total(images: usize, total: f64) -> Timing {
        Timing {
            images,
            seconds_per_image: total / images as f64,
            images_per_second: images as f64 / total.max(1e-9),
        }
    }
}

/// Run `op` over every input and time it. With more than one input the first
/// call is a warm-up and is left out of the averages; all outputs are kept.
pub fn timing_report<T, R>(inputs: &[T], mut op: impl FnMut(&T) -> Result<R>) -> Result<(Vec<R>, Timing)> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("timing needs at least one input".into()));
    }
    let mut outputs = Vec::with_capacity(inputs.len());
    let timed = if inputs.len() > 1 {
        outputs.push(op(&inputs[0])?);
        &inputs[1..]
    } else {
        inputs
    };
    let start = Instant::now();
    for x in timed {
        outputs.push(op(x)?);
    }
    let total = start.elapsed().as_secs_f64();
    Ok((outputs, Timing::from_total(timed.len(), total)))
}

/// A metric value that survives JSON: non-finite values become strings
/// (`"inf"`, `"-inf"`, `"nan"`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue(pub f64);

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = MetricValue;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<MetricValue, E> {
                Ok(MetricValue(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<MetricValue, E> {
                Ok(MetricValue(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<MetricValue, E> {
                Ok(MetricValue(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<MetricValue, E> {
                match v {
                    "inf" => Ok(MetricValue(f64::INFINITY)),
                    "-inf" => Ok(MetricValue(f64::NEG_INFINITY)),
                    "nan" => Ok(MetricValue(f64::NAN)),
                    _ => Err(E::custom(format!("unexpected metric string {v}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Fixed-width bins over `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

impl BinSpec {
    pub fn psnr_default() -> Self {
        BinSpec {
            lo: 10.0,
            hi: 40.0,
            width: 1.0,
        }
    }

    pub fn ssim_default() -> Self {
        BinSpec {
            lo: 0.0,
            hi: 1.0,
            width: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.hi > self.lo) {
            return Err(Error::Config(format!("invalid histogram bins {self:?}")));
        }
        Ok(())
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.width).round().max(1.0) as usize;
        (0..=n).map(|i| self.lo + i as f64 * self.width).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn build(spec: &BinSpec, values: &[f64]) -> Histogram {
        let edges = spec.edges();
        let n = edges.len() - 1;
        let (lo, hi) = (edges[0], edges[n]);
        let mut h = Histogram {
            counts: vec![0; n],
            edges,
            underflow: 0,
            overflow: 0,
        };
        for &v in values {
            if v.is_nan() || v < lo {
                h.underflow += 1;
            } else if v > hi {
                h.overflow += 1;
            } else {
                let i = (((v - lo) / spec.width).floor() as usize).min(n - 1);
                h.counts[i] += 1;
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub metrics: BTreeMap<String, MetricValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: MetricValue,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Histogram>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub images: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionCounts>,
}

/// Per-image metric records plus aggregates. Aggregation sorts records by
/// id first, so the summary does not depend on insertion or merge order.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub records: Vec<ImageRecord>,
    pub bins: BTreeMap<String, BinSpec>,
    pub timing: Option<Timing>,
    pub confusion: Option<ConfusionCounts>,
}

impl EvalReport {
    pub fn new(bins: BTreeMap<String, BinSpec>) -> Self {
        EvalReport {
            bins,
            ..Default::default()
        }
    }

    pub fn push(&mut self, id: impl Into<String>, metrics: &[(&str, f64)]) {
        self.records.push(ImageRecord {
            id: id.into(),
            metrics: metrics
                .iter()
                .map(|(k, v)| (k.to_string(), MetricValue(*v)))
                .collect(),
        });
    }

    pub fn merge(&mut self, other: EvalReport) {
        self.records.extend(other.records);
        if let Some(c) = other.confusion {
            self.confusion = Some(self.confusion.unwrap_or_default().merge(&c));
        }
    }

    fn sorted(&self) -> Vec<&ImageRecord> {
        let mut r: Vec<&ImageRecord> = self.records.iter().collect();
        r.sort_by(|a, b| a.id.cmp(&b.id));
        r
    }

    /// Values of one metric, sorted by image id.
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.sorted()
            .iter()
            .filter_map(|r| r.metrics.get(metric).map(|v| v.0))
            .collect()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        let v = self.values(metric);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn summary(&self) -> ReportSummary {
        let names: std::collections::BTreeSet<&String> =
            self.records.iter().flat_map(|r| r.metrics.keys()).collect();
        let metrics = names
            .into_iter()
            .map(|name| {
                let values = self.values(name);
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let histogram = self.bins.get(name).map(|b| Histogram::build(b, &values));
                (
                    name.clone(),
                    MetricSummary {
                        count: values.len(),
                        mean: MetricValue(mean),
                        histogram,
                    },
                )
            })
            .collect();
        ReportSummary {
            images: self.records.len(),
            metrics,
            timing: self.timing,
            confusion: self.confusion,
        }
    }

    /// One JSON object per image, sorted by id.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.sorted() {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Write `report.jsonl` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let jsonl = dir.join("report.jsonl");
        std::fs::write(&jsonl, self.to_jsonl()?).map_err(|e| Error::io(&jsonl, e))?;
        let summary = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(&summary, text).map_err(|e| Error::io(&summary, e))?;
        Ok(())
    }
}

/// Default bins: PSNR in 1 dB steps over [10, 40], SSIM in 0.02 steps over [0, 1].
pub fn default_bins() -> BTreeMap<String, BinSpec> {
    BTreeMap::from([
        ("psnr".to_string(), BinSpec::psnr_default()),
        ("ssim".to_string(), BinSpec::ssim_default()),
    ])
}
