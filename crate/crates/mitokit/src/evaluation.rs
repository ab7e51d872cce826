//! Per-domain and pooled classifier metrics, detection scoring, and report
//! rendering.
//!
//! Classification quality is summarized the way domain-shift studies report
//! it: one metrics row per acquisition domain plus an overall row computed
//! over the pooled record set (pooling, not averaging rows, so large domains
//! weigh more). Detection quality is a centroid-matching precision/recall/F1
//! aggregate over patches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Track};
use crate::error::{Error, Result};
use crate::geometry::{match_detections, Detection};
use crate::inference::ClsPrediction;

/// Default operating point for turning probabilities into labels.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Threshold metrics plus ranking quality for one set of binary outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    /// Area under the ROC curve via the Mann-Whitney pairwise statistic
    /// (ties count one half). Absent when only one class is present —
    /// undefined is reported as absent, never as zero.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Always exactly `(sensitivity + specificity) / 2`.
    pub balanced_accuracy: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Compute threshold and ranking metrics for binary labels.
///
/// A record is predicted positive when its probability is at least
/// `threshold`. With no positives (or no negatives) present, the
/// corresponding rate falls back to zero rather than dividing by zero.
pub fn binary_metrics(labels: &[u8], probs: &[f64], threshold: f64) -> Result<BinaryMetrics> {
    if labels.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot compute metrics on an empty record set".into(),
        ));
    }
    if labels.len() != probs.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.len()],
            got: vec![probs.len()],
        });
    }
    if !threshold.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} is not finite"
        )));
    }
    for (&l, &p) in labels.iter().zip(probs) {
        if l > 1 {
            return Err(Error::InvalidParameter(format!(
                "label {l} is not binary (expected 0 or 1)"
            )));
        }
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "probability {p} outside [0, 1]"
            )));
        }
    }

    let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&l, &p) in labels.iter().zip(probs) {
        let predicted_pos = p >= threshold;
        match (l, predicted_pos) {
            (1, true) => tp += 1,
            (1, false) => fneg += 1,
            (0, false) => tn += 1,
            (0, true) => fp += 1,
            _ => unreachable!("labels validated binary"),
        }
    }
    let n_pos = tp + fneg;
    let n_neg = tn + fp;
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let sensitivity = rate(tp, n_pos);
    let specificity = rate(tn, n_neg);
    Ok(BinaryMetrics {
        auc: mann_whitney_auc(labels, probs),
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        sensitivity,
        specificity,
        balanced_accuracy: (sensitivity + specificity) / 2.0,
        n_pos,
        n_neg,
    })
}

/// Rank-based AUC with average ranks over ties; `None` for single-class
/// inputs. Equals the exhaustive pairwise count (ties one half) exactly.
fn mann_whitney_auc(labels: &[u8], probs: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].partial_cmp(&probs[b]).expect("finite probs"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && probs[order[j]] == probs[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) share the average 1-based rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One scored record for the per-domain report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub domain_id: u8,
    pub label: u8,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain_id: u8,
    pub metrics: BinaryMetrics,
}

/// Per-domain rows plus a pooled overall row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetricsReport {
    pub threshold: f64,
    /// Sorted by domain id.
    pub rows: Vec<DomainRow>,
    /// Computed over all records pooled, not by averaging the rows.
    pub overall: BinaryMetrics,
}

/// Group records by domain and compute metrics per group and pooled.
pub fn domain_report(records: &[DomainRecord], threshold: f64) -> Result<DomainMetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot build a report from zero records".into(),
        ));
    }
    let mut by_domain: BTreeMap<u8, (Vec<u8>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let entry = by_domain.entry(r.domain_id).or_default();
        entry.0.push(r.label);
        entry.1.push(r.probability);
    }
    let mut rows = Vec::with_capacity(by_domain.len());
    for (domain_id, (labels, probs)) in &by_domain {
        rows.push(DomainRow {
            domain_id: *domain_id,
            metrics: binary_metrics(labels, probs, threshold)?,
        });
    }
    let all_labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let all_probs: Vec<f64> = records.iter().map(|r| r.probability).collect();
    Ok(DomainMetricsReport {
        threshold,
        rows,
        overall: binary_metrics(&all_labels, &all_probs, threshold)?,
    })
}

/// Join predictions with manifest ground truth and build the report.
pub fn report_from_predictions(
    predictions: &[ClsPrediction],
    manifest: &DatasetManifest,
    threshold: f64,
) -> Result<DomainMetricsReport> {
    if manifest.track != Track::Classification {
        return Err(Error::InvalidParameter(format!(
            "per-domain classification report needs a classification manifest, got {}",
            manifest.track
        )));
    }
    let mut records = Vec::with_capacity(predictions.len());
    for p in predictions {
        let rec = manifest.record(&p.patch_id).ok_or_else(|| Error::Schema {
            record: p.patch_id.clone(),
            reason: "predicted patch is not in the manifest".into(),
        })?;
        let label = rec.class_label.ok_or_else(|| Error::Schema {
            record: p.patch_id.clone(),
            reason: "manifest record has no class label".into(),
        })?;
        records.push(DomainRecord {
            domain_id: rec.domain_id,
            label,
            probability: p.probability,
        });
    }
    domain_report(&records, threshold)
}

impl DomainMetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Fixed-width text table, one row per domain plus the pooled overall
    /// row. Values are rounded to three decimals here and only here.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10}{:>8}{:>8}{:>8}{:>8}{:>9}{:>7}{:>7}",
            "domain", "auc", "acc", "sens", "spec", "bal_acc", "n_pos", "n_neg"
        );
        let mut line = |name: &str, m: &BinaryMetrics| {
            let auc = match m.auc {
                Some(a) => format!("{a:.3}"),
                None => "n/a".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<10}{:>8}{:>8.3}{:>8.3}{:>8.3}{:>9.3}{:>7}{:>7}",
                name, auc, m.accuracy, m.sensitivity, m.specificity, m.balanced_accuracy,
                m.n_pos, m.n_neg
            );
        };
        for row in &self.rows {
            line(&row.domain_id.to_string(), &row.metrics);
        }
        line("overall", &self.overall);
        out
    }
}

/// Aggregate detection precision/recall/F1 over matched centroids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Score predicted detections against manifest centroid annotations.
///
/// Predictions are `(patch_id, detection)` rows as written by the detection
/// CSV helpers. Every manifest patch counts: one without predictions
/// contributes all its annotations as misses. Predictions for unknown
/// patches are an error.
pub fn detection_f1(
    predictions: &[(String, Detection)],
    truth: &DatasetManifest,
    radius_px: f64,
) -> Result<DetectionScore> {
    if truth.track != Track::Detection {
        return Err(Error::InvalidParameter(format!(
            "detection scoring needs a detection manifest, got {}",
            truth.track
        )));
    }
    let mut by_patch: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for (patch_id, det) in predictions {
        if truth.record(patch_id).is_none() {
            return Err(Error::Schema {
                record: patch_id.clone(),
                reason: "predicted patch is not in the manifest".into(),
            });
        }
        by_patch.entry(patch_id.as_str()).or_default().push(*det);
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let empty: Vec<Detection> = Vec::new();
    for rec in &truth.records {
        let preds = by_patch.get(rec.patch_id.as_str()).unwrap_or(&empty);
        let truths = rec.centroids.clone().unwrap_or_default();
        let m = match_detections(preds, &truths, radius_px)?;
        tp += m.true_positives;
        fp += m.false_positives;
        fneg += m.false_negatives;
    }
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = rate(tp, tp + fp);
    let recall = rate(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(DetectionScore {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
    })
}

const ROC_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Render per-domain ROC curves as a small standalone SVG.
///
/// Domains with a single class have no curve and are skipped; at least one
/// domain must be plottable.
pub fn roc_svg(records: &[DomainRecord]) -> Result<String> {
    let mut by_domain: BTreeMap<u8, (Vec<u8>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let entry = by_domain.entry(r.domain_id).or_default();
        entry.0.push(r.label);
        entry.1.push(r.probability);
    }
    let size = 480.0;
    let margin = 48.0;
    let span = size - 2.0 * margin;
    let sx = |fpr: f64| margin + fpr * span;
    let sy = |tpr: f64| size - margin - tpr * span;

    let mut curves = String::new();
    let mut legend = String::new();
    let mut plotted = 0usize;
    for (domain_id, (labels, probs)) in &by_domain {
        let Some(points) = roc_points(labels, probs) else {
            continue;
        };
        let color = ROC_COLORS[plotted % ROC_COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(fpr, tpr)| format!("{:.2},{:.2}", sx(fpr), sy(tpr)))
            .collect();
        let _ = writeln!(
            curves,
            r#"  <polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            legend,
            r#"  <text x="{:.0}" y="{:.0}" fill="{color}" font-size="13">domain {domain_id}</text>"#,
            margin + 12.0,
            margin + 18.0 + 16.0 * plotted as f64,
        );
        plotted += 1;
    }
    if plotted == 0 {
        return Err(Error::InvalidParameter(
            "no domain has both classes; nothing to plot".into(),
        ));
    }
    Ok(format!(
        concat!(
            r##"<svg xmlns="http://www.w3.org/2000/svg" width="480" height="480" viewBox="0 0 480 480">"##,
            "\n",
            r##"  <rect width="480" height="480" fill="white"/>"##,
            "\n",
            r##"  <line x1="{m0}" y1="{m1}" x2="{m2}" y2="{m1}" stroke="#333"/>"##,
            "\n",
            r##"  <line x1="{m0}" y1="{m1}" x2="{m0}" y2="{m3}" stroke="#333"/>"##,
            "\n",
            r##"  <line x1="{m0}" y1="{m1}" x2="{m2}" y2="{m3}" stroke="#bbb" stroke-dasharray="5,4"/>"##,
            "\n",
            r##"  <text x="{xc}" y="470" text-anchor="middle" font-size="13">false positive rate</text>"##,
            "\n",
            r##"  <text x="14" y="{yc}" transform="rotate(-90 14 {yc})" text-anchor="middle" font-size="13">true positive rate</text>"##,
            "\n{curves}{legend}</svg>\n"
        ),
        m0 = margin,
        m1 = size - margin,
        m2 = size - margin,
        m3 = margin,
        xc = size / 2.0,
        yc = size / 2.0,
        curves = curves,
        legend = legend,
    ))
}

/// ROC polyline from (0,0) to (1,1); `None` for single-class inputs.
fn roc_points(labels: &[u8], probs: &[f64]) -> Option<Vec<(f64, f64)>> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).expect("finite probs"));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        // One step per distinct threshold so ties become diagonal segments.
        while j < order.len() && probs[order[j]] == probs[order[i]] {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    Some(points)
}
