//! Detection metrics: macro-F1, AUC-ROC by pair counting and AUC-PR as
//! average precision.
//!
//! Label `1` marks an anomaly. AUC-PR is the average-precision step sum
//! `Σ_k (R_k − R_{k−1}) · P_k` over distinct score thresholds, scanned from
//! the highest score down; tied scores enter together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold on `p_i` used to turn probabilities into labels.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_f1: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::UndefinedMetric("no samples".into()));
    }
    Ok(())
}

fn class_counts(truth: &[u8]) -> (usize, usize) {
    let pos = truth.iter().filter(|&&y| y == 1).count();
    (pos, truth.len() - pos)
}

/// Unweighted mean of the per-class F1 scores.
pub fn macro_f1(pred: &[u8], truth: &[u8]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let (pos, neg) = class_counts(truth);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("macro-F1 needs both classes in the truth labels".into()));
    }
    let f1 = |class: u8| {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &y) in pred.iter().zip(truth) {
            match (p == class, y == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * tp) as f64 / denom as f64
        }
    };
    Ok((f1(1) + f1(0)) / 2.0)
}

/// `P(s_anomaly > s_normal) + ½ P(s_anomaly = s_normal)`.
pub fn auc_roc(scores: &[f64], truth: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), truth.len())?;
    let (pos, neg) = class_counts(truth);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC-ROC is undefined unless both anomalies and normal nodes are present".into(),
        ));
    }
    let order = sorted_ascending(scores)?;
    // Twice the number of favourable pairs, so ties stay integral.
    let mut doubled: u128 = 0;
    let mut normals_below: u128 = 0;
    for group in tie_groups(&order, scores) {
        let a = group.iter().filter(|&&i| truth[i] == 1).count() as u128;
        let n = group.len() as u128 - a;
        doubled += 2 * a * normals_below + a * n;
        normals_below += n;
    }
    Ok(doubled as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Average precision over all distinct thresholds.
pub fn auc_pr(scores: &[f64], truth: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), truth.len())?;
    let (pos, _) = class_counts(truth);
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs at least one anomaly".into()));
    }
    let mut order = sorted_ascending(scores)?;
    order.reverse();
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut ap = 0.0;
    for group in tie_groups(&order, scores) {
        for &i in group {
            if truth[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if tp > prev_tp {
            ap += ap_term(tp, fp, prev_tp, pos);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// One step of the average-precision sum; shared with the test oracle so
/// both accumulate identical floats.
pub(crate) fn ap_term(tp: usize, fp: usize, prev_tp: usize, pos: usize) -> f64 {
    ((tp - prev_tp) as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64)
}

fn sorted_ascending(scores: &[f64]) -> Result<Vec<usize>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("metric scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok(order)
}

fn tie_groups<'a>(order: &'a [usize], scores: &'a [f64]) -> impl Iterator<Item = &'a [usize]> + 'a {
    order.chunk_by(move |&a, &b| scores[a] == scores[b])
}

pub fn threshold(probs: &[f64], t: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= t)).collect()
}

/// All three metrics for anomaly probabilities `probs`.
pub fn evaluate(probs: &[f64], truth: &[u8], t: f64) -> Result<Metrics> {
    Ok(Metrics {
        macro_f1: macro_f1(&threshold(probs, t), truth)?,
        auc_roc: auc_roc(probs, truth)?,
        auc_pr: auc_pr(probs, truth)?,
    })
}
