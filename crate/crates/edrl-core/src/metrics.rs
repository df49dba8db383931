//! Evaluation metrics: exact accuracy, macro one-vs-rest AUC with midrank
//! tie handling, and macro F1 with per-class counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regime: String,
    pub epoch: usize,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassStats>,
}

/// Midrank (Mann-Whitney) AUC of one class's scores against binary
/// relevance. `None` when the class has no positives or no negatives.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // midranks over tied groups, 1-based
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = positive
        .iter()
        .zip(&ranks)
        .filter(|(&b, _)| b)
        .map(|(_, &r)| r)
        .sum();
    Some((rank_sum - (p * (p + 1)) as f64 / 2.0) / (p as f64 * n as f64))
}

/// Metrics from per-sample class scores (higher = more confident).
/// Predictions are score argmax with ties to the lowest class.
pub fn compute_metrics(
    scores: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    regime: &str,
    epoch: usize,
) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("metrics on an empty test set".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let total = labels.len();
    let predictions: Vec<usize> = scores
        .iter()
        .map(|row| {
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();

    let mut per_class = Vec::with_capacity(n_classes);
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let tp = predictions
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == c && l == c)
            .count();
        let fp = predictions
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == c && l != c)
            .count();
        let fn_ = predictions
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p != c && l == c)
            .count();
        let support = labels.iter().filter(|&&l| l == c).count();
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_class.push(ClassStats { class: c, support, tp, fp, fn_, precision, recall, f1 });
    }

    // macro one-vs-rest AUC over classes present on both sides
    let mut auc_sum = 0.0;
    let mut auc_classes = 0usize;
    for c in 0..n_classes {
        let class_scores: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(auc) = binary_auc(&class_scores, &positive) {
            auc_sum += auc;
            auc_classes += 1;
        }
    }
    let macro_auc = if auc_classes == 0 { 0.5 } else { auc_sum / auc_classes as f64 };

    Ok(MetricsReport {
        regime: regime.to_string(),
        epoch,
        accuracy: correct as f64 / total as f64,
        macro_auc,
        macro_f1: f1_sum / n_classes as f64,
        per_class,
    })
}
