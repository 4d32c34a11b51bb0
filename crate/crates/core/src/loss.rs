//! Class-balanced focal loss on raw logits.
//!
//! `L = -(1/N) Σ [α y (1-p)^γ log p + (1-α)(1-y) p^γ log(1-p)]` with
//! `p = σ(z)`. Logs are taken as `log σ(z) = -softplus(-z)` and
//! `log(1-σ(z)) = -softplus(z)` so saturated logits never hit `log(0)`.

use crate::error::{Error, Result};

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check(logits: &[f64], labels: &[f64], alpha: f64, gamma: f64) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Empty("focal loss over an empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logits but {} labels", logits.len(), labels.len())));
    }
    if !(alpha > 0.0 && alpha < 1.0) || !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha={alpha} gamma={gamma}")));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean focal loss.
pub fn focal_loss(logits: &[f64], labels: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    check(logits, labels, alpha, gamma)?;
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let p = sigmoid(z);
            let log_p = -softplus(-z);
            let log_q = -softplus(z);
            -(alpha * y * (1.0 - p).powf(gamma) * log_p
                + (1.0 - alpha) * (1.0 - y) * p.powf(gamma) * log_q)
        })
        .sum();
    Ok(total / logits.len() as f64)
}

/// d(mean focal loss)/d(logit) for every sample.
pub fn focal_loss_grad(logits: &[f64], labels: &[f64], alpha: f64, gamma: f64) -> Result<Vec<f64>> {
    check(logits, labels, alpha, gamma)?;
    let n = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let p = sigmoid(z);
            let q = 1.0 - p;
            let log_p = -softplus(-z);
            let log_q = -softplus(z);
            let pos = if y == 1.0 { alpha * q.powf(gamma) * (q - gamma * p * log_p) } else { 0.0 };
            let neg = if y == 0.0 {
                (1.0 - alpha) * p.powf(gamma) * (gamma * q * log_q - p)
            } else {
                0.0
            };
            -(pos + neg) / n
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_value() {
        let l = focal_loss(&[0.0], &[1.0], 0.5, 2.0).unwrap();
        assert!((l - 0.5 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let l = focal_loss(&[800.0, -800.0], &[0.0, 1.0], 0.5, 2.0).unwrap();
        assert!(l.is_finite() && l > 0.0);
        let g = focal_loss_grad(&[800.0, -800.0], &[0.0, 1.0], 0.5, 2.0).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(focal_loss(&[], &[], 0.5, 2.0), Err(Error::Empty(_))));
        assert!(focal_loss(&[0.0], &[0.5], 0.5, 2.0).is_err());
        assert!(focal_loss(&[0.0], &[1.0], 1.0, 2.0).is_err());
        assert!(focal_loss(&[0.0], &[1.0], 0.5, -1.0).is_err());
    }
}
