//! Evaluation math: Dice overlap, confusion metrics, hinge loss, ROC/AUC
//! and voxel-level FROC.
//!
//! Threshold conventions: `confusion` counts `score > threshold` as positive
//! (matching the thresholded SVM prediction), while the ROC/FROC sweeps use
//! `score >= threshold` so that the sweep over unique score values reaches
//! the all-positive corner. Undefined rates (empty truth class) are reported
//! as `None` with a flag, never silently as 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Mask3D;

/// Counts and derived rates at one operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub flags: Vec<String>,
}

/// One point of a ROC sweep; positives are `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// One point of a voxel-level FROC sweep; positives are `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fp_count: usize,
    pub sensitivity: f64,
}

/// Full evaluation record for one case / operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionReport,
    pub dsc: f64,
    pub hinge: Option<f64>,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub froc: Vec<FrocPoint>,
}

/// Dice similarity coefficient 2|A.M| / (|A| + |M|).
///
/// Two empty masks score 1 by convention.
pub fn dice(a: &Mask3D, m: &Mask3D) -> Result<f64> {
    if a.dims != m.dims {
        return Err(Error::Argument("dice: mask dims differ".into()));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (va, vm) in a.values().iter().zip(m.values()) {
        inter += usize::from(*va == 1 && *vm == 1);
        total += usize::from(*va == 1) + usize::from(*vm == 1);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Dice over flat boolean slices (used for kept-region subsets).
pub fn dice_flat(a: &[bool], m: &[bool]) -> Result<f64> {
    if a.len() != m.len() {
        return Err(Error::Argument("dice: length mismatch".into()));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (va, vm) in a.iter().zip(m) {
        inter += usize::from(*va && *vm);
        total += usize::from(*va) + usize::from(*vm);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Confusion counts at `score > threshold`.
pub fn confusion(scores: &[f64], truth: &[bool], threshold: f64) -> Result<ConfusionReport> {
    if scores.len() != truth.len() {
        return Err(Error::Argument(
            "confusion: one score per evaluated voxel required".into(),
        ));
    }
    if scores.is_empty() {
        return Err(Error::Argument("confusion: empty input".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &t) in scores.iter().zip(truth) {
        match (s > threshold, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut flags = Vec::new();
    let sensitivity = if tp + fn_ > 0 {
        Some(tp as f64 / (tp + fn_) as f64)
    } else {
        flags.push("sensitivity_undefined_no_positives".to_string());
        None
    };
    let specificity = if tn + fp > 0 {
        Some(tn as f64 / (tn + fp) as f64)
    } else {
        flags.push("specificity_undefined_no_negatives".to_string());
        None
    };
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    Ok(ConfusionReport {
        tp,
        fp,
        tn,
        fn_,
        accuracy,
        sensitivity,
        specificity,
        flags,
    })
}

/// Mean hinge loss: mean of max(0, 1 - y d).
pub fn hinge_loss(decisions: &[f64], labels: &[i8]) -> Result<f64> {
    if decisions.len() != labels.len() || decisions.is_empty() {
        return Err(Error::Argument("hinge_loss: length mismatch or empty".into()));
    }
    if labels.iter().any(|&y| y != 1 && y != -1) {
        return Err(Error::Label("hinge_loss: labels must be +1/-1".into()));
    }
    let sum: f64 = decisions
        .iter()
        .zip(labels)
        .map(|(&d, &y)| (1.0 - f64::from(y) * d).max(0.0))
        .sum();
    Ok(sum / decisions.len() as f64)
}

/// ROC sweep over the unique score values (ties grouped) plus the (0, 0)
/// anchor, with trapezoidal AUC.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != truth.len() || scores.is_empty() {
        return Err(Error::Argument("roc_auc: length mismatch or empty".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::EmptyClass("roc_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        // Consume the whole tie group at threshold t.
        while i < order.len() && scores[order[i]] == t {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let point = RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        };
        auc += (point.fpr - prev.fpr) * (point.tpr + prev.tpr) / 2.0;
        points.push(point);
    }
    Ok((points, auc))
}

/// Voxel-level FROC: absolute false-positive count and sensitivity at each
/// requested threshold (positives are `score >= threshold`).
pub fn froc(scores: &[f64], truth: &[bool], thresholds: &[f64]) -> Result<Vec<FrocPoint>> {
    if scores.len() != truth.len() || scores.is_empty() {
        return Err(Error::Argument("froc: length mismatch or empty".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    if pos == 0 {
        return Err(Error::EmptyClass("froc needs positive voxels".into()));
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&s, &label) in scores.iter().zip(truth) {
            if s >= t {
                if label {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        out.push(FrocPoint {
            threshold: t,
            fp_count: fp,
            sensitivity: tp as f64 / pos as f64,
        });
    }
    Ok(out)
}

/// Evenly spaced thresholds covering [min, max] of the scores, descending
/// sensitivity as the threshold rises.
pub fn froc_thresholds(scores: &[f64], count: usize) -> Vec<f64> {
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if count <= 1 || !(max > min) {
        return vec![min];
    }
    (0..count)
        .map(|i| min + (max - min) * i as f64 / (count - 1) as f64)
        .collect()
}
