//! Scalar reference implementations shared by the topic tests and the
//! acceptance suite.

use super::uniform;
use freqdetect::frequency::{fadc_forward, FadcVars};
use freqdetect::rng::Rng;
use freqdetect::{Tape, Tensor};
use rand::Rng as _;

/// Walks output pixels and looks up the grid that owns each one.
pub fn npr_oracle(img: &Tensor, l: usize) -> Vec<f64> {
    let [n, c, h, w] = img.shape()[..] else { panic!() };
    let at = |b: usize, ch: usize, y: usize, x: usize| img.data()[((b * c + ch) * h + y) * w + x];
    let per = l * l - 1;
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for i in 1..=per {
                for y in 0..h {
                    for x in 0..w {
                        let (gy, gx) = (y - y % l, x - x % l);
                        out.push(at(b, ch, gy + i / l, gx + i % l) - at(b, ch, gy, gx));
                    }
                }
            }
        }
    }
    out
}

pub struct Fadc {
    pub weight: Tensor,
    pub pred_w: Tensor,
    pub pred_b: Tensor,
    pub lam_w: Tensor,
    pub lam_b: Tensor,
    pub sel_w: Tensor,
    pub sel_b: Tensor,
}

impl Fadc {
    pub fn random(r: &mut freqdetect::rng::Rng, c: usize, k: usize, bands: usize) -> Self {
        Fadc {
            weight: uniform(r, &[c, c, k, k], -0.5, 0.5),
            pred_w: uniform(r, &[1, c, 3, 3], -0.3, 0.3),
            pred_b: uniform(r, &[1], 0.5, 1.5),
            lam_w: uniform(r, &[1, c, 1, 1], -1.0, 1.0),
            lam_b: uniform(r, &[1], -0.5, 0.5),
            sel_w: uniform(r, &[bands, c, 1, 1], -1.0, 1.0),
            sel_b: uniform(r, &[bands], -0.5, 0.5),
        }
    }

    pub fn zero(c: usize, k: usize, bands: usize) -> Self {
        Fadc {
            weight: Tensor::zeros([c, c, k, k]),
            pred_w: Tensor::zeros([1, c, 3, 3]),
            pred_b: Tensor::zeros([1]),
            lam_w: Tensor::zeros([1, c, 1, 1]),
            lam_b: Tensor::zeros([1]),
            sel_w: Tensor::zeros([bands, c, 1, 1]),
            sel_b: Tensor::zeros([bands]),
        }
    }

    pub fn vars(&self, t: &mut Tape) -> FadcVars {
        FadcVars {
            weight: t.constant(self.weight.clone()),
            pred_w: t.constant(self.pred_w.clone()),
            pred_b: t.constant(self.pred_b.clone()),
            lam_w: t.constant(self.lam_w.clone()),
            lam_b: t.constant(self.lam_b.clone()),
            sel_w: t.constant(self.sel_w.clone()),
            sel_b: t.constant(self.sel_b.clone()),
        }
    }
}

pub fn run_fadc(x: &Tensor, p: &Fadc, d_base: f64) -> Tensor {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let vars = p.vars(&mut t);
    let y = fadc_forward(&mut t, xv, &vars, d_base).unwrap().out;
    t.value(y).clone()
}

/// Bilinear read of one plane with zeros outside.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1.0) * (1.0 - fy) * fx
        + at(y0 + 1.0, x0) * fy * (1.0 - fx)
        + at(y0 + 1.0, x0 + 1.0) * fy * fx
}

/// The adaptive convolution written out position by position.
pub fn fadc_oracle(x: &Tensor, p: &Fadc, d_base: f64) -> Tensor {
    let [n, c, h, w] = x.shape()[..] else { panic!() };
    let k = p.weight.shape()[2];
    let r = (k / 2) as isize;
    let xs = x.data();
    let plane = |ni: usize, ci: usize| &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
    let wt = p.weight.data();
    let mut out = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for py in 0..h {
            for px in 0..w {
                let mut f = p.pred_b.data()[0];
                for ci in 0..c {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (yy, xx) = (py as isize + dy, px as isize + dx);
                            if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                                let kw = p.pred_w.data()[ci * 9 + ((dy + 1) * 3 + dx + 1) as usize];
                                f += kw * plane(ni, ci)[yy as usize * w + xx as usize];
                            }
                        }
                    }
                }
                let dil = f.max(0.0) * d_base;
                let mut g = p.lam_b.data()[0];
                for ci in 0..c {
                    g += p.lam_w.data()[ci] * plane(ni, ci)[py * w + px];
                }
                let lam = 2.0 / (1.0 + (-g).exp());
                for o in 0..c {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let kern = &wt[(o * c + ci) * k * k..(o * c + ci + 1) * k * k];
                        let mean = kern.iter().sum::<f64>() / (k * k) as f64;
                        for ky in 0..k {
                            for kx in 0..k {
                                let wk = mean + lam * (kern[ky * k + kx] - mean);
                                let sy = py as f64 + (ky as isize - r) as f64 * dil;
                                let sx = px as f64 + (kx as isize - r) as f64 * dil;
                                acc += wk * bilinear(plane(ni, ci), h, w, sy, sx);
                            }
                        }
                    }
                    out[((ni * c + o) * h + py) * w + px] = acc;
                }
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

/// Sweep every distinct score as an inclusive cut, highest first.
pub fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let (mut ap, mut prev_tp) = (0.0, 0usize);
    for c in cuts {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= c && l == 1).count();
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= c && l == 0).count();
        let step = tp as f64 / positives as f64 - prev_tp as f64 / positives as f64;
        ap += step * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    ap
}

/// Best balanced accuracy over every way of flagging the top-k distinct
/// score groups, k = 0..=groups.
pub fn best_ba_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut best = f64::NEG_INFINITY;
    for k in 0..=distinct.len() {
        let flagged = |s: f64| distinct[..k].contains(&s);
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| flagged(s) && l == 1).count() as f64;
        let tn = scores.iter().zip(labels).filter(|(&s, &l)| !flagged(s) && l == 0).count() as f64;
        best = best.max(0.5 * (tp / pos + tn / neg));
    }
    best
}

pub fn fuzz_case(r: &mut Rng) -> (Vec<f64>, Vec<u8>) {
    let n = r.gen_range(2..40);
    // coarse grid so ties are common
    let grid = r.gen_range(3..12);
    let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..grid)) / grid as f64 - 0.5).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
    labels[0] = 1;
    labels[1] = 0;
    (scores, labels)
}
