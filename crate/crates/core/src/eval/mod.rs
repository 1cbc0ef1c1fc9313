//! Confusion matrices, tile-level metrics derived from segmentation masks,
//! and a wall-clock benchmark harness.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::tiles::{label_for, TileRecord};
use crate::error::{Error, Result};
use crate::ir::{Graph, Weights};
use crate::quant::{forward_int8, QuantizedModel};
use crate::runtime::predict;
use crate::tensor::Tensor;

/// Probability threshold for binary decisions.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tn + self.tp, self.total())
    }

    pub fn fp_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fn_rate(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }

    /// Row-normalized `[[tn, fp], [fn, tp]]`; an empty row stays zero.
    pub fn normalized(&self) -> [[f64; 2]; 2] {
        let neg = self.tn + self.fp;
        let pos = self.fn_ + self.tp;
        [[ratio(self.tn, neg), ratio(self.fp, neg)], [ratio(self.fn_, pos), ratio(self.tp, pos)]]
    }

    pub fn add(&mut self, pred: bool, label: bool) {
        match (pred, label) {
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (true, true) => self.tp += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tp += other.tp;
    }
}

/// Counts from probabilistic (or 0/1) predictions against binary labels.
pub fn confusion(preds: &[f64], labels: &[u8]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Argument(format!(
            "confusion needs equal non-empty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        m.add(p >= DECISION_THRESHOLD, l != 0);
    }
    Ok(m)
}

/// Cloud fraction of a probability mask after thresholding.
pub fn mask_fraction(mask: &[f64]) -> f64 {
    ratio(mask.iter().filter(|&&p| p >= DECISION_THRESHOLD).count() as u64, mask.len() as u64)
}

/// Tile-level matrix: a tile is predicted cloudy when its predicted cloud
/// fraction reaches `threshold`.
pub fn tile_metrics_from_segmentation(masks_pred: &[Vec<f64>], tiles: &[TileRecord], threshold: f64) -> Result<ConfusionMatrix> {
    if masks_pred.len() != tiles.len() {
        return Err(Error::Argument(format!("{} predicted masks for {} tiles", masks_pred.len(), tiles.len())));
    }
    let mut pred = Vec::with_capacity(tiles.len());
    for (mask, tile) in masks_pred.iter().zip(tiles) {
        if mask.len() != tile.mask.len() {
            return Err(Error::Argument(format!("mask of {} pixels for a {}-pixel tile", mask.len(), tile.mask.len())));
        }
        pred.push(mask_fraction(mask));
    }
    let truth: Vec<f64> = tiles.iter().map(|t| t.cloud_fraction).collect();
    tile_metrics_from_fractions(&pred, &truth, threshold)
}

/// Tile-level matrix from predicted and ground-truth cloud fractions.
pub fn tile_metrics_from_fractions(pred: &[f64], truth: &[f64], threshold: f64) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!("{} predicted fractions for {} tiles", pred.len(), truth.len())));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &t) in pred.iter().zip(truth) {
        m.add(label_for(p, threshold) == 1, label_for(t, threshold) == 1);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub model: String,
    pub level: String,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

impl MetricsRow {
    pub fn new(model: &str, level: &str, m: &ConfusionMatrix) -> Self {
        MetricsRow {
            model: model.into(),
            level: level.into(),
            tn: m.tn,
            fp: m.fp,
            fn_: m.fn_,
            tp: m.tp,
            accuracy: m.accuracy(),
            fp_rate: m.fp_rate(),
            fn_rate: m.fn_rate(),
        }
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Text table with row-normalized percentages at two decimals.
pub fn render_confusion(title: &str, m: &ConfusionMatrix) -> String {
    let n = m.normalized();
    let pct = |x: f64| format!("{:.2}%", x * 100.0);
    let mut s = String::new();
    writeln!(s, "{title}").unwrap();
    writeln!(s, "{:<12} {:>18} {:>18}", "", "pred not_cloudy", "pred cloudy").unwrap();
    writeln!(s, "{:<12} {:>18} {:>18}", "not_cloudy", format!("{} (TN)", pct(n[0][0])), format!("{} (FP)", pct(n[0][1]))).unwrap();
    writeln!(s, "{:<12} {:>18} {:>18}", "cloudy", format!("{} (FN)", pct(n[1][0])), format!("{} (TP)", pct(n[1][1]))).unwrap();
    writeln!(s, "accuracy={} n={}", pct(m.accuracy()), m.total()).unwrap();
    s
}

/// Model plus the executor that runs it.
#[derive(Debug, Clone, Copy)]
pub enum Executor<'a> {
    F32 { graph: &'a Graph, weights: &'a Weights },
    Int8(&'a QuantizedModel),
}

impl Executor<'_> {
    pub fn id(&self) -> &'static str {
        match self {
            Executor::F32 { .. } => "f32",
            Executor::Int8(_) => "int8",
        }
    }

    pub fn model_name(&self) -> &str {
        match self {
            Executor::F32 { graph, .. } => &graph.arch_name,
            Executor::Int8(qm) => &qm.graph.arch_name,
        }
    }

    /// Float inputs; the int8 executor quantizes them onto its input grid.
    pub fn run(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Executor::F32 { graph, weights } => predict(graph, weights, x),
            Executor::Int8(qm) => forward_int8(qm, &qm.quantize_input(x)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub model: String,
    pub executor: String,
    pub times_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub fps: f64,
    /// SHA-256 over one pass of outputs, for checking timing-independence.
    pub output_digest: String,
}

fn digest(outputs: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for t in outputs {
        for v in t.to_f64_vec() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Serial timing loop; run `i` uses `inputs[i % len]`.
pub fn benchmark(exec: Executor<'_>, inputs: &[Tensor], warmup: usize, runs: usize) -> Result<BenchResult> {
    if runs == 0 || inputs.is_empty() {
        return Err(Error::Argument("benchmark needs at least one run and one input".into()));
    }
    let reference: Vec<Tensor> = inputs.iter().map(|x| exec.run(x)).collect::<Result<_>>()?;
    for i in 0..warmup {
        exec.run(&inputs[i % inputs.len()])?;
    }
    let mut times_ms = Vec::with_capacity(runs);
    for i in 0..runs {
        let x = &inputs[i % inputs.len()];
        let t0 = Instant::now();
        let y = exec.run(x)?;
        times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        if !y.bitwise_eq(&reference[i % inputs.len()]) {
            return Err(Error::State("inference output changed between runs".into()));
        }
    }
    let mean_ms = times_ms.iter().sum::<f64>() / runs as f64;
    let mut sorted = times_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let median_ms = if runs % 2 == 1 { sorted[runs / 2] } else { (sorted[runs / 2 - 1] + sorted[runs / 2]) / 2.0 };
    Ok(BenchResult {
        model: exec.model_name().to_string(),
        executor: exec.id().into(),
        times_ms,
        mean_ms,
        median_ms,
        fps: 1000.0 / mean_ms,
        output_digest: digest(&reference),
    })
}
