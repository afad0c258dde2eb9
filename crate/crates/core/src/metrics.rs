//! Classification metrics: balanced accuracy, AUROC, average precision,
//! Cohen's kappa and support-weighted F1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("class {0} has no true examples")]
    AbsentClass(usize),
    #[error("{0}")]
    Invalid(String),
    #[error("chance agreement is 1; kappa is undefined")]
    DegenerateKappa,
}

pub type MetricResult<T> = Result<T, MetricError>;

/// True and predicted labels in `[0, classes)`, with optional per-class
/// probability rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalBatch {
    pub classes: usize,
    pub labels: Vec<usize>,
    pub preds: Vec<usize>,
    pub scores: Option<Vec<Vec<f64>>>,
}

impl EvalBatch {
    pub fn new(
        classes: usize,
        labels: Vec<usize>,
        preds: Vec<usize>,
        scores: Option<Vec<Vec<f64>>>,
    ) -> MetricResult<Self> {
        if labels.len() != preds.len() {
            return Err(MetricError::Invalid(format!(
                "{} labels but {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        if labels.is_empty() {
            return Err(MetricError::Invalid("empty batch".into()));
        }
        if let Some(&bad) = labels.iter().chain(&preds).find(|&&l| l >= classes) {
            return Err(MetricError::Invalid(format!("label {bad} outside {classes} classes")));
        }
        if let Some(rows) = &scores {
            if rows.len() != labels.len() {
                return Err(MetricError::Invalid("one score row per sample required".into()));
            }
            for (i, r) in rows.iter().enumerate() {
                let sum: f64 = r.iter().sum();
                if r.len() != classes || (sum - 1.0).abs() > 1e-6 {
                    return Err(MetricError::Invalid(format!(
                        "score row {i} must hold {classes} probabilities summing to 1"
                    )));
                }
            }
        }
        Ok(Self {
            classes,
            labels,
            preds,
            scores,
        })
    }

    /// `m[true][pred]` counts.
    pub fn confusion(&self) -> Vec<Vec<usize>> {
        let mut m = vec![vec![0; self.classes]; self.classes];
        for (&t, &p) in self.labels.iter().zip(&self.preds) {
            m[t][p] += 1;
        }
        m
    }

    fn require_all_classes(&self) -> MetricResult<Vec<Vec<usize>>> {
        let m = self.confusion();
        match m.iter().position(|row| row.iter().sum::<usize>() == 0) {
            Some(c) => Err(MetricError::AbsentClass(c)),
            None => Ok(m),
        }
    }
}

/// Mean per-class recall.
pub fn balanced_accuracy(b: &EvalBatch) -> MetricResult<f64> {
    let m = b.require_all_classes()?;
    let sum: f64 = m
        .iter()
        .enumerate()
        .map(|(i, row)| row[i] as f64 / row.iter().sum::<usize>() as f64)
        .sum();
    Ok(sum / b.classes as f64)
}

fn check_binary(labels: &[usize], scores: &[f64]) -> MetricResult<(usize, usize)> {
    if labels.len() != scores.len() || labels.is_empty() {
        return Err(MetricError::Invalid("labels and scores must be equal-length and non-empty".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(MetricError::Invalid("binary labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks.
pub fn auroc(labels: &[usize], scores: &[f64]) -> MetricResult<f64> {
    let (pos, neg) = check_binary(labels, scores)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::Invalid("AUROC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over descending distinct
/// score thresholds, tied scores entering together.
pub fn auc_pr(labels: &[usize], scores: &[f64]) -> MetricResult<f64> {
    let (pos, _) = check_binary(labels, scores)?;
    if pos == 0 {
        return Err(MetricError::Invalid("AUC-PR needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// `(p_o - p_e) / (1 - p_e)` from the confusion matrix.
pub fn cohens_kappa(b: &EvalBatch) -> MetricResult<f64> {
    let m = b.confusion();
    let n = b.labels.len() as f64;
    let po = (0..b.classes).map(|i| m[i][i]).sum::<usize>() as f64 / n;
    let pe: f64 = (0..b.classes)
        .map(|i| {
            let row: usize = m[i].iter().sum();
            let col: usize = m.iter().map(|r| r[i]).sum();
            (row as f64 / n) * (col as f64 / n)
        })
        .sum();
    if pe >= 1.0 {
        return Err(MetricError::DegenerateKappa);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Per-class F1 (0 when precision and recall are both undefined) weighted
/// by true support.
pub fn weighted_f1(b: &EvalBatch) -> MetricResult<f64> {
    let m = b.require_all_classes()?;
    let n = b.labels.len() as f64;
    let mut total = 0.0;
    for i in 0..b.classes {
        let tp = m[i][i] as f64;
        let support: usize = m[i].iter().sum();
        let predicted: usize = m.iter().map(|r| r[i]).sum();
        let denom = support as f64 + predicted as f64;
        let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
        total += support as f64 / n * f1;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub n_samples: usize,
    pub n_classes: usize,
}

/// Binary batches report B-Acc, AUROC and AUC-PR (positive class 1);
/// multiclass batches report B-Acc, kappa and weighted F1.
pub fn report(b: &EvalBatch) -> MetricResult<EvalReport> {
    let mut metrics = BTreeMap::new();
    metrics.insert("balanced_accuracy".to_string(), balanced_accuracy(b)?);
    if b.classes == 2 {
        let scores: Vec<f64> = match &b.scores {
            Some(rows) => rows.iter().map(|r| r[1]).collect(),
            None => b.preds.iter().map(|&p| p as f64).collect(),
        };
        metrics.insert("auroc".to_string(), auroc(&b.labels, &scores)?);
        metrics.insert("auc_pr".to_string(), auc_pr(&b.labels, &scores)?);
    } else {
        metrics.insert("cohens_kappa".to_string(), cohens_kappa(b)?);
        metrics.insert("weighted_f1".to_string(), weighted_f1(b)?);
    }
    Ok(EvalReport {
        metrics,
        n_samples: b.labels.len(),
        n_classes: b.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(c: usize, l: &[usize], p: &[usize]) -> EvalBatch {
        EvalBatch::new(c, l.to_vec(), p.to_vec(), None).unwrap()
    }

    #[test]
    fn hand_cases() {
        // TP=9 FN=1 TN=8 FP=2
        let mut l = vec![1; 10];
        l.extend(vec![0; 10]);
        let mut p = vec![1; 9];
        p.push(0);
        p.extend(vec![0; 8]);
        p.extend(vec![1; 2]);
        assert!((balanced_accuracy(&batch(2, &l, &p)).unwrap() - 0.85).abs() < 1e-15);
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(auroc(&[1, 1, 0, 0], &s).unwrap(), 1.0);
        assert_eq!(auroc(&[1, 0, 1, 0], &s).unwrap(), 0.75);
        assert_eq!(auroc(&[1, 0, 1, 0], &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(auc_pr(&[1, 1, 0, 0], &s).unwrap(), 1.0);
        assert!((auc_pr(&[1, 0, 0, 0, 1], &[0.2; 5]).unwrap() - 0.4).abs() < 1e-15);
        let b = batch(3, &[0, 1, 2, 2], &[0, 1, 2, 2]);
        assert_eq!(cohens_kappa(&b).unwrap(), 1.0);
        assert_eq!(weighted_f1(&b).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        assert_eq!(balanced_accuracy(&batch(3, &[0, 1], &[0, 1])), Err(MetricError::AbsentClass(2)));
        assert!(auroc(&[1, 1], &[0.1, 0.2]).is_err());
        assert!(auc_pr(&[0, 0], &[0.1, 0.2]).is_err());
        assert_eq!(cohens_kappa(&batch(2, &[0, 0], &[0, 0])), Err(MetricError::DegenerateKappa));
        assert!(EvalBatch::new(2, vec![0], vec![0], Some(vec![vec![0.3, 0.3]])).is_err());
    }

    #[test]
    fn never_predicted_class_contributes_zero() {
        let b = batch(2, &[0, 0, 1, 1], &[0, 0, 0, 0]);
        // class 0: P=0.5 R=1 -> F1=2/3, weight 1/2
        assert!((weighted_f1(&b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_selects_metrics() {
        let r = report(&batch(2, &[0, 1, 0, 1], &[0, 1, 1, 1])).unwrap();
        let keys: Vec<_> = r.metrics.keys().cloned().collect();
        assert_eq!(keys, ["auc_pr", "auroc", "balanced_accuracy"]);
        let r = report(&batch(3, &[0, 1, 2], &[0, 1, 1])).unwrap();
        let keys: Vec<_> = r.metrics.keys().cloned().collect();
        assert_eq!(keys, ["balanced_accuracy", "cohens_kappa", "weighted_f1"]);
    }
}
