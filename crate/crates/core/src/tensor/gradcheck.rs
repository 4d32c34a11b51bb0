//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over all checked entries.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic and numeric gradients of a scalar function.
///
/// `build` records the computation for the given inputs on a fresh tape and
/// returns the loss. Every entry of every input is perturbed by `±h`.
pub fn check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vars)?;
        t.value(l).item()
    };

    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let loss = build(&mut t, &vars)?;
    let grads = t.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - h;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_err: worst, checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_passes() {
        let x = Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = check(&[x], 1e-5, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let cube = t.mul(sq, v[0])?;
            t.sum(cube)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }
}
