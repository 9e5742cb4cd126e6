//! Imbalance-aware evaluation: rank-based AUC, ROC curves, NPV, per-class
//! recall, and specificity at fixed sensitivity. Accuracy is deliberately
//! not reported anywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_two_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("both classes must be present".into()));
    }
    Ok((n_pos, n_neg))
}

/// AUC as the Mann-Whitney statistic (ties count 0.5), computed with the
/// O(n log n) average-rank method. Positive class = abnormal.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores/labels length mismatch".into()));
    }
    let (n_pos, n_neg) = check_two_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks over tied groups (1-based ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // mean of ranks i+1 ..= j+1
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Confusion counts at a threshold; predict abnormal iff score >= threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn confusion_at(scores: &[f64], labels: &[bool], threshold: f64) -> Counts {
    let mut c = Counts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        let predicted_abnormal = s >= threshold;
        match (l, predicted_abnormal) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Negative predictive value TN / (TN + FN); `None` when nothing is
/// predicted negative.
pub fn npv(counts: &Counts) -> Option<f64> {
    let denom = counts.tn + counts.fn_;
    if denom == 0 {
        None
    } else {
        Some(counts.tn as f64 / denom as f64)
    }
}

/// (normal_recall, abnormal_recall) = (TN/(TN+FP), TP/(TP+FN)).
pub fn recall_per_class(counts: &Counts) -> Result<(f64, f64)> {
    let n_normal = counts.tn + counts.fp;
    let n_abnormal = counts.tp + counts.fn_;
    if n_normal == 0 || n_abnormal == 0 {
        return Err(Error::Metric("both classes must be present".into()));
    }
    Ok((
        counts.tn as f64 / n_normal as f64,
        counts.tp as f64 / n_abnormal as f64,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC sweep: one point per distinct score plus the (0, 0) endpoint. Points
/// are non-decreasing in both coordinates, from (0,0) to (1,1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores/labels length mismatch".into()));
    }
    let (n_pos, n_neg) = check_two_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: s,
        });
        i = j;
    }
    Ok(points)
}

/// Trapezoidal area under a ROC point list.
pub fn roc_auc_trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Maximum specificity among operating points with sensitivity >= `level`;
/// equivalently the specificity at the smallest tpr >= level on the ROC.
/// Computed from integer counts so it agrees exactly with threshold scans.
pub fn specificity_at_sensitivity(scores: &[f64], labels: &[bool], level: f64) -> Result<f64> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::Metric("sensitivity level must be in (0, 1]".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores/labels length mismatch".into()));
    }
    let (n_pos, n_neg) = check_two_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let sens = tp as f64 / n_pos as f64;
        if sens >= level {
            let tn = n_neg - fp;
            return Ok(tn as f64 / n_neg as f64);
        }
        i = j;
    }
    unreachable!("sweep always reaches sensitivity 1")
}

/// Full metric report at one operating threshold; rates in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    /// `None` when no sample is predicted negative; serialized as null.
    pub npv: Option<f64>,
    pub npv_defined: bool,
    pub normal_recall: f64,
    pub abnormal_recall: f64,
    pub spec_at_87: f64,
    pub spec_at_80: f64,
    pub threshold_used: f64,
    pub counts: Counts,
}

pub fn compute_report(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricReport> {
    let auc_value = auc(scores, labels)?;
    let counts = confusion_at(scores, labels, threshold);
    let npv_value = npv(&counts);
    let (normal_recall, abnormal_recall) = recall_per_class(&counts)?;
    Ok(MetricReport {
        auc: auc_value,
        npv: npv_value,
        npv_defined: npv_value.is_some(),
        normal_recall,
        abnormal_recall,
        spec_at_87: specificity_at_sensitivity(scores, labels, 0.87)?,
        spec_at_80: specificity_at_sensitivity(scores, labels, 0.80)?,
        threshold_used: threshold,
        counts,
    })
}

impl MetricReport {
    /// JSON with both fraction and percent forms of every rate.
    pub fn to_json(&self) -> serde_json::Value {
        let pct = |v: f64| (v * 100.0 * 10000.0).round() / 10000.0;
        serde_json::json!({
            "fraction": self,
            "percent": {
                "auc": pct(self.auc),
                "npv": self.npv.map(pct),
                "normal_recall": pct(self.normal_recall),
                "abnormal_recall": pct(self.abnormal_recall),
                "spec_at_87": pct(self.spec_at_87),
                "spec_at_80": pct(self.spec_at_80),
            },
            "threshold_used": self.threshold_used,
            "counts": self.counts,
        })
    }
}

/// Renders a ROC curve as a standalone SVG with the AUC annotated.
pub fn render_roc_svg(points: &[RocPoint], auc_value: f64, title: &str) -> String {
    let size = 480.0;
    let margin = 48.0;
    let plot = size - 2.0 * margin;
    let map_x = |fpr: f64| margin + fpr * plot;
    let map_y = |tpr: f64| size - margin - tpr * plot;
    let mut path = String::new();
    for (i, p) in points.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        path.push_str(&format!("{}{:.2},{:.2} ", cmd, map_x(p.fpr), map_y(p.tpr)));
    }
    let end = size - margin;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">"
    ));
    svg.push_str(&format!(
        "<rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>"
    ));
    svg.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{end}\" x2=\"{end}\" y2=\"{margin}\" stroke=\"#bbbbbb\" stroke-dasharray=\"4,4\"/>"
    ));
    svg.push_str(&format!(
        "<rect x=\"{margin}\" y=\"{margin}\" width=\"{plot}\" height=\"{plot}\" fill=\"none\" stroke=\"black\"/>"
    ));
    svg.push_str(&format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>",
        path.trim_end()
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"14\">{} AUC = {:.4}</text>",
        margin + 8.0,
        margin - 10.0,
        title,
        auc_value
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">FPR</text>",
        size / 2.0,
        size - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{c}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {c})\">TPR</text>",
        c = size / 2.0
    ));
    svg.push_str("</svg>\n");
    svg
}
