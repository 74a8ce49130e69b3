//! Sample-level and mask-level detection metrics.

use super::{EvalError, Result};

fn check_pair(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::InvalidLabel(l));
    }
    Ok(())
}

/// Fraction of samples where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_pair(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks,
/// so every tied positive/negative pair contributes one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(EvalError::NonFinite(*s));
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
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Binary F1 of `score >= threshold` predictions; 0 when there are no true
/// positives.
pub fn f1_score(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_pair(scores, labels)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Pixel F1 and IoU of a probability mask binarized at `threshold` against a
/// binary ground truth. Both are 1 when prediction and truth are empty and
/// 0 when exactly one is.
pub fn pixel_f1_iou(pred: &[f64], truth: &[f64], threshold: f64) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(EvalError::Dimensions {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p >= threshold, t >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let pred_empty = tp + fp == 0;
    let truth_empty = tp + fn_ == 0;
    if pred_empty && truth_empty {
        return Ok((1.0, 1.0));
    }
    if pred_empty || truth_empty {
        return Ok((0.0, 0.0));
    }
    Ok((f1_from_counts(tp, fp, fn_), tp as f64 / (tp + fp + fn_) as f64))
}
