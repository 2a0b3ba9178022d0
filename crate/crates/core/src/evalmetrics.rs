//! Threshold-swept IoU metrics and pixel-pooled average precision.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, LdzError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { thresholds: (1..=19).map(|i| i as f32 * 0.05).collect() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.thresholds;
        if t.is_empty() || t.windows(2).any(|w| w[0] >= w[1]) || t.iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return Err(LdzError::Invalid("threshold grid must be sorted and inside (0, 1)".into()));
        }
        Ok(())
    }
}

/// `|P ∩ G| / |P ∪ G|`, 1 when both are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(LdzError::Invalid(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    let (i, u) = inter_union(pred.iter().copied(), gt);
    Ok(ratio(i, u))
}

fn inter_union(pred: impl Iterator<Item = bool>, gt: &[bool]) -> (u64, u64) {
    let (mut i, mut u) = (0, 0);
    for (p, &g) in pred.zip(gt) {
        i += (p && g) as u64;
        u += (p || g) as u64;
    }
    (i, u)
}

fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Best over the grid of the mean per-sample IoU.
    pub miou: f64,
    pub miou_tau: f32,
    /// Best over the grid of the dataset-pooled foreground IoU.
    pub iou_fg: f64,
    pub iou_fg_tau: f32,
    /// Best over the grid of the per-sample foreground IoU mean.
    pub iou_fg_per_sample: f64,
    pub iou_fg_per_sample_tau: f32,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: String,
    pub intersection: u64,
    pub union: u64,
    /// IoU at the best mIoU threshold.
    pub iou: f64,
}

fn check_inputs(preds: &[Vec<f32>], gts: &[Vec<bool>]) -> Result<()> {
    if preds.is_empty() {
        return Err(LdzError::Invalid("empty prediction set".into()));
    }
    if preds.len() != gts.len() {
        return Err(LdzError::Invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    for (k, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(LdzError::Invalid(format!("sample {k}: prediction has {} pixels, mask {}", p.len(), g.len())));
        }
    }
    Ok(())
}

/// Per-sample `(intersection, union)` at threshold `tau`.
fn counts_at(preds: &[Vec<f32>], gts: &[Vec<bool>], tau: f32) -> Vec<(u64, u64)> {
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| inter_union(p.iter().map(|&v| v >= tau), g))
        .collect()
}

/// Area under the step-wise precision/recall curve over all pooled pixels.
/// Pixels with equal scores enter together.
pub fn average_precision(preds: &[Vec<f32>], gts: &[Vec<bool>]) -> Result<f64> {
    check_inputs(preds, gts)?;
    let mut scored: Vec<(f32, bool)> = preds
        .iter()
        .zip(gts)
        .flat_map(|(p, g)| p.iter().copied().zip(g.iter().copied()))
        .collect();
    if scored.iter().any(|(s, _)| !s.is_finite()) {
        return Err(LdzError::Invalid("non-finite prediction".into()));
    }
    let positives = scored.iter().filter(|(_, g)| *g).count() as u64;
    if positives == 0 {
        return Err(LdzError::Invalid("no positive pixels".into()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut prev_tp) = (0u64, 0u64, 0u64);
    let mut ap = 0.0;
    let mut k = 0;
    while k < scored.len() {
        let s = scored[k].0;
        while k < scored.len() && scored[k].0 == s {
            tp += scored[k].1 as u64;
            seen += 1;
            k += 1;
        }
        if tp > prev_tp {
            let recall_gain = (tp - prev_tp) as f64 / positives as f64;
            ap += recall_gain * (tp as f64 / seen as f64);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// Computes the metric suite plus the per-sample table at the best mIoU
/// threshold.
pub fn evaluate(
    preds: &[Vec<f32>],
    gts: &[Vec<bool>],
    ids: &[String],
    cfg: &EvalConfig,
) -> Result<(Metrics, Vec<SampleRow>)> {
    cfg.validate()?;
    check_inputs(preds, gts)?;
    if ids.len() != preds.len() {
        return Err(LdzError::Invalid("sample id count differs from predictions".into()));
    }
    let n = preds.len() as f64;
    let mut best_mean = (f64::NEG_INFINITY, 0f32, Vec::new());
    let mut best_pooled = (f64::NEG_INFINITY, 0f32);
    let mut best_fg = (f64::NEG_INFINITY, 0f32);
    for &tau in &cfg.thresholds {
        let counts = counts_at(preds, gts, tau);
        let mean = counts.iter().map(|&(i, u)| ratio(i, u)).sum::<f64>() / n;
        let (si, su) = counts.iter().fold((0, 0), |(a, b), &(i, u)| (a + i, b + u));
        let pooled = ratio(si, su);
        // equals the per-sample IoU for binary masks
        let fg = mean;
        if pooled > best_pooled.0 {
            best_pooled = (pooled, tau);
        }
        if fg > best_fg.0 {
            best_fg = (fg, tau);
        }
        if mean > best_mean.0 {
            best_mean = (mean, tau, counts);
        }
    }
    let ap = average_precision(preds, gts)?;
    let rows = ids
        .iter()
        .zip(&best_mean.2)
        .map(|(id, &(i, u))| SampleRow { sample_id: id.clone(), intersection: i, union: u, iou: ratio(i, u) })
        .collect();
    let m = Metrics {
        miou: best_mean.0,
        miou_tau: best_mean.1,
        iou_fg: best_pooled.0,
        iou_fg_tau: best_pooled.1,
        iou_fg_per_sample: best_fg.0,
        iou_fg_per_sample_tau: best_fg.1,
        ap,
    };
    Ok((m, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: String,
    pub domain: String,
    pub metrics: Metrics,
    pub config: EvalConfig,
    pub dataset_hash: String,
    pub checkpoint_hash: String,
    /// Seeds and upstream hashes that produced the predictions.
    pub provenance: std::collections::BTreeMap<String, String>,
    pub per_sample: Vec<SampleRow>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn read_json(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn per_sample_csv(&self) -> String {
        let mut s = String::from("sample_id,intersection,union,iou\n");
        for r in &self.per_sample {
            let _ = writeln!(s, "{},{},{},{:.6}", r.sample_id, r.intersection, r.union, r.iou);
        }
        s
    }
}
