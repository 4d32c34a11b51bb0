#![allow(dead_code)]

pub mod fd;
pub mod oracles;
pub mod probe;

use freqdetect::rng::{self, Rng};
use freqdetect::{Result, Tape, Tensor, Var};
use rand::Rng as _;

pub fn rng(name: &str) -> Rng {
    rng::substream(7, name)
}

pub fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// `Σ y ⊙ R` for a fixed pseudo-random `R`, so every output entry carries a
/// distinct weight in the loss.
pub fn probe_loss(t: &mut Tape, y: Var) -> Result<Var> {
    let mut r = rng::substream(99, "probe");
    let shape = t.shape(y).to_vec();
    let weights = t.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = t.mul(y, weights)?;
    t.sum(p)
}
