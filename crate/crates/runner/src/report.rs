//! Seed-averaged comparison table over evaluation reports.

use std::fmt::Write as _;

use ldznet::evalmetrics::EvalReport;
use ldznet::segnets::SegModelKind;
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: SegModelKind,
    pub miou: f64,
    pub iou_fg: f64,
    pub ap: f64,
    pub miou_b: f64,
    /// `(mIoU_A - mIoU_B) / mIoU_A`.
    pub relative_drop: f64,
    pub per_seed_miou: Vec<f64>,
    pub per_seed_miou_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<ModelRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn find<'a>(reports: &'a [EvalReport], kind: SegModelKind, domain: &str) -> RunResult<&'a EvalReport> {
    reports
        .iter()
        .find(|r| r.model == kind.tag() && r.domain == domain)
        .ok_or_else(|| RunError::Config(format!("no {} report for domain {domain}", kind.tag())))
}

impl ComparisonTable {
    /// `per_seed[i]` holds every report produced under `seeds[i]`.
    pub fn build(seeds: &[u64], per_seed: &[Vec<EvalReport>]) -> RunResult<ComparisonTable> {
        if seeds.is_empty() || seeds.len() != per_seed.len() {
            return Err(RunError::Config("report needs one report set per seed".into()));
        }
        let mut rows = Vec::new();
        for kind in SegModelKind::ALL {
            let (mut a, mut fg, mut ap, mut b, mut drops) = (vec![], vec![], vec![], vec![], vec![]);
            for reports in per_seed {
                let ra = find(reports, kind, "A")?;
                let rb = find(reports, kind, "B")?;
                a.push(ra.metrics.miou);
                fg.push(ra.metrics.iou_fg);
                ap.push(ra.metrics.ap);
                b.push(rb.metrics.miou);
                drops.push((ra.metrics.miou - rb.metrics.miou) / ra.metrics.miou);
            }
            rows.push(ModelRow {
                model: kind,
                miou: mean(&a),
                iou_fg: mean(&fg),
                ap: mean(&ap),
                miou_b: mean(&b),
                relative_drop: mean(&drops),
                per_seed_miou: a,
                per_seed_miou_b: b,
            });
        }
        Ok(ComparisonTable { seeds: seeds.to_vec(), rows })
    }

    pub fn row(&self, kind: SegModelKind) -> &ModelRow {
        self.rows.iter().find(|r| r.model == kind).expect("every model has a row")
    }

    pub fn to_markdown(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut s = format!("Mean over seeds {} (metrics in percent).\n\n", seeds.join(", "));
        s.push_str("| Model | mIoU | IoU_FG | AP | mIoU (domain B) | relative drop A→B |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1}% |",
                r.model.display_name(),
                100.0 * r.miou,
                100.0 * r.iou_fg,
                100.0 * r.ap,
                100.0 * r.miou_b,
                100.0 * r.relative_drop
            );
        }
        s
    }
}
