//! Accuracy, average precision and validation threshold calibration.
//!
//! Scores are "higher means fake"; an item is predicted positive when its
//! score is strictly greater than the threshold.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Empty("no scores".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Confusion counts at a threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.tn + self.fp + self.fn_) as f64
    }

    /// Mean of the per-class recalls; a class with no samples counts as 0.
    pub fn balanced_accuracy(&self) -> f64 {
        let rate = |hit: usize, miss: usize| {
            if hit + miss == 0 {
                0.0
            } else {
                hit as f64 / (hit + miss) as f64
            }
        };
        0.5 * (rate(self.tp, self.fn_) + rate(self.tn, self.fp))
    }
}

pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    Ok(Confusion::at(scores, labels, threshold).accuracy())
}

/// `Σ_k (R_k − R_{k−1}) · P_k` over distinct scores in descending order,
/// with tied scores entering together.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::InvalidArgument("average precision needs a positive sample".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall_step = tp as f64 / positives as f64 - prev_tp as f64 / positives as f64;
        ap += recall_step * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    Ok(ap)
}

/// Candidate thresholds: midpoints between adjacent distinct scores plus one
/// point below the minimum and one above the maximum, ascending.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    out.push(s[0] - 1.0);
    out.extend(s.windows(2).map(|p| (p[0] + p[1]) / 2.0));
    out.push(s[s.len() - 1] + 1.0);
    out
}

/// Threshold maximizing balanced accuracy over [`candidate_thresholds`].
/// Ties go to the smallest candidate.
pub fn calibrate_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::InvalidArgument("calibration needs both classes".into()));
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in candidate_thresholds(scores) {
        let ba = Confusion::at(scores, labels, t).balanced_accuracy();
        if ba > best.0 {
            best = (ba, t);
        }
    }
    Ok(best.1)
}
