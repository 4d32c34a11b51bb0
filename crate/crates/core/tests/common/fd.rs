//! Finite-difference checks for every differentiable tape operation.

use std::sync::Arc;

use super::{probe_loss, rng, uniform};
use freqdetect::tensor::gradcheck::check;
use freqdetect::tensor::Dilation;
use freqdetect::{Tape, Tensor, Var};

pub const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

/// Worst relative error per checked case.
#[derive(Default)]
pub struct Cases(pub Vec<(String, f64)>);

impl Cases {
    fn fd(&mut self, name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> freqdetect::Result<Var>) {
        let r = check(&inputs, H, |t, v| {
            let y = f(t, v)?;
            probe_loss(t, y)
        })
        .unwrap();
        self.0.push((name.to_string(), r.max_rel_err));
    }
}

fn away_from_zero(r: &mut freqdetect::rng::Rng, shape: &[usize]) -> Tensor {
    uniform(r, shape, 0.2, 1.5).map(|v| if v > 0.85 { v } else { -v })
}

pub fn fd_elementwise(c: &mut Cases) {
    let mut r = rng("fd-elem");
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[1, 3, 1], -1.0, 1.0);
    c.fd("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    c.fd("sub", vec![b.clone(), a.clone()], |t, v| t.sub(v[0], v[1]));
    c.fd("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    c.fd("scale", vec![a.clone()], |t, v| t.scale(v[0], -2.5));
    c.fd("relu", vec![away_from_zero(&mut r, &[3, 5])], |t, v| t.relu(v[0]));
    c.fd("sigmoid", vec![a.clone()], |t, v| t.sigmoid(v[0]));
    c.fd("broadcast_to", vec![b], |t, v| t.broadcast_to(v[0], &[2, 3, 4]));
}

pub fn fd_reductions_and_layout(c: &mut Cases) {
    let mut r = rng("fd-red");
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    for axis in 0..3 {
        c.fd("softmax", vec![a.clone()], |t, v| t.softmax(v[0], axis));
        c.fd("sum_axis", vec![a.clone()], |t, v| t.sum_axis(v[0], axis));
        c.fd("mean_axis", vec![a.clone()], |t, v| t.mean_axis(v[0], axis));
        c.fd("max_axis", vec![a.clone()], |t, v| t.max_axis(v[0], axis));
        c.fd("slice", vec![a.clone()], |t, v| t.slice(v[0], axis, 1, 1));
    }
    c.fd("sum", vec![a.clone()], |t, v| t.sum(v[0]));
    c.fd("mean", vec![a.clone()], |t, v| t.mean(v[0]));
    c.fd("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[6, 4]));
    c.fd("transpose", vec![a.clone()], |t, v| t.transpose(v[0]));
    let b = uniform(&mut r, &[2, 1, 4], -1.0, 1.0);
    c.fd("concat", vec![a, b], |t, v| t.concat(&[v[0], v[1], v[0]], 1));
}

pub fn fd_matmul(c: &mut Cases) {
    let mut r = rng("fd-mm");
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4, 2], -1.0, 1.0);
    c.fd("matmul 2d", vec![a, b], |t, v| t.matmul(v[0], v[1]));
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[1, 4, 5], -1.0, 1.0);
    c.fd("matmul batched", vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]));
    let b = uniform(&mut r, &[2, 4, 5], -1.0, 1.0);
    c.fd("matmul batched", vec![a, b], |t, v| t.matmul(v[0], v[1]));
}

pub fn fd_attention_stack(c: &mut Cases) {
    let mut r = rng("fd-attn");
    let q = uniform(&mut r, &[1, 4], -1.0, 1.0);
    let k = uniform(&mut r, &[5, 4], -1.0, 1.0);
    let vv = uniform(&mut r, &[5, 3], -1.0, 1.0);
    c.fd("attention", vec![q, k, vv], |t, v| {
        let kt = t.transpose(v[1])?;
        let s = t.matmul(v[0], kt)?;
        let s = t.scale(s, 0.5)?;
        let a = t.softmax(s, 1)?;
        t.matmul(a, v[2])
    });
}

pub fn fd_conv(c: &mut Cases) {
    let mut r = rng("fd-conv");
    let x = uniform(&mut r, &[2, 4, 6, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 2, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    for (stride, d, groups) in [(1, 1.0, 2), (2, 1.0, 2), (1, 2.0, 2)] {
        c.fd("conv2d", vec![x.clone(), w.clone(), b.clone()], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, Dilation::Scalar(d), groups)
        });
    }
    let w1 = uniform(&mut r, &[3, 4, 3, 3], -1.0, 1.0);
    c.fd("conv2d fractional", vec![x.clone(), w1], |t, v| {
        t.conv2d(v[0], v[1], None, 1, Dilation::Scalar(1.3), 1)
    });
}

pub fn fd_modulated_conv(c: &mut Cases) {
    let mut r = rng("fd-mod");
    let x = uniform(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
    let wl = uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
    let wh = uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
    let lam = uniform(&mut r, &[1, 1, 6, 6], 0.0, 2.0);
    // Bilinear weights are piecewise linear in the dilation; keep every tap
    // away from integer crossings so central differences stay smooth.
    let dil = uniform(&mut r, &[1, 1, 6, 6], 1.1, 1.4);
    c.fd("modulated_conv", vec![x, wl, wh, lam, dil], |t, v| {
        t.modulated_conv(v[0], v[1], Some((v[2], v[3])), v[4])
    });
}

pub fn fd_fourier(c: &mut Cases) {
    let mut r = rng("fd-fft");
    let x = uniform(&mut r, &[2, 4, 8, 2], -1.0, 1.0);
    c.fd("fft2", vec![x.clone()], |t, v| t.fft2(v[0]));
    c.fd("ifft2", vec![x], |t, v| t.ifft2(v[0]));
    let (h, w) = (8, 8);
    let low: Vec<f64> = (0..h * w)
        .map(|i| {
            let (u, v) = (i / w, i % w);
            let fu = u.min(h - u);
            let fv = v.min(w - v);
            if fu + fv <= 2 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let high: Vec<f64> = low.iter().map(|m| 1.0 - m).collect();
    let masks = Arc::new(vec![low, high]);
    let x = uniform(&mut r, &[2, 2, h, w], -1.0, 1.0);
    c.fd("band_split", vec![x], move |t, v| t.band_split(v[0], masks.clone()));
}

pub fn fd_haar(c: &mut Cases) {
    let mut r = rng("fd-haar");
    let x = uniform(&mut r, &[2, 2, 4, 6], -1.0, 1.0);
    c.fd("haar", vec![x.clone()], |t, v| t.haar(v[0]));
    let y = uniform(&mut r, &[1, 8, 3, 2], -1.0, 1.0);
    c.fd("haar_inverse", vec![y], |t, v| t.haar_inverse(v[0]));
}

pub fn fd_normalization_dropout_loss(c: &mut Cases) {
    let mut r = rng("fd-norm");
    let x = uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let g = uniform(&mut r, &[2], 0.5, 1.5);
    let b = uniform(&mut r, &[2], -1.0, 1.0);
    c.fd("batchnorm_train", vec![x.clone(), g.clone(), b.clone()], |t, v| {
        Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)
    });
    c.fd("batchnorm_inference", vec![x.clone(), g, b], |t, v| {
        t.batchnorm_inference(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)
    });
    c.fd("dropout", vec![x], |t, v| t.dropout(v[0], 0.3, true, 5, "fd"));
    let z = uniform(&mut r, &[6], -3.0, 3.0);
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let res = check(&[z], H, |t, v| t.focal_loss(v[0], &labels, 0.3, 2.0)).unwrap();
    c.0.push(("focal_loss".into(), res.max_rel_err));
}

pub fn all() -> Vec<(String, f64)> {
    let mut c = Cases::default();
    fd_elementwise(&mut c);
    fd_reductions_and_layout(&mut c);
    fd_matmul(&mut c);
    fd_attention_stack(&mut c);
    fd_conv(&mut c);
    fd_modulated_conv(&mut c);
    fd_fourier(&mut c);
    fd_haar(&mut c);
    fd_normalization_dropout_loss(&mut c);
    c.0
}
