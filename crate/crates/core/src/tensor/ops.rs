//! Forward definitions of the differentiable operators.

use std::sync::Arc;

use rand::Rng as _;

use super::conv::{self, ConvGeom, Dilation, SampleGeom};
use super::shape::{broadcast_shape, for_each_broadcast, split_axis};
use super::tape::{
    band_split, batched_matmul, for_each_nchw, haar_forward, haar_inverse, transpose_last2,
    BatchStats, Op, Tape, Var,
};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::rng;

impl Tape {
    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, ())> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape())?;
        let mut out = vec![0.0; shape.iter().product()];
        let (da, db) = (va.data(), vb.data());
        for_each_broadcast(&shape, va.shape(), vb.shape(), |o, i, j| out[o] = f(da[i], db[j]));
        Ok((Tensor::new(shape, out)?, ()))
    }

    /// Elementwise sum with broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x + y)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x - y)?;
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x * y)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(crate::loss::sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = split_axis(v.shape(), axis)?;
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |k: usize| (o * len + k) * inner + j;
                let m = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..len {
                    let e = (d[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[at(k)] /= s;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::Softmax { x, axis })
    }

    /// Matrix product of 2-D operands, or batched `[B, M, K] × [B, K, N]`
    /// where either batch may be 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = batched_matmul(self.value(a), self.value(b))?;
        self.push(t, Op::MatMul { a, b })
    }

    /// Swap the two trailing axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ndim() < 2 {
            return Err(shape_err("transpose needs at least 2 axes"));
        }
        let t = transpose_last2(self.value(a));
        self.push(t, Op::TransposeLast2(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(a))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let s = broadcast_shape(v.shape(), shape)?;
        if s != shape {
            return Err(shape_err(format!("cannot broadcast {:?} to {shape:?}", v.shape())));
        }
        let mut out = vec![0.0; s.iter().product()];
        let d = v.data();
        for_each_broadcast(&s, v.shape(), v.shape(), |o, i, _| out[o] = d[i]);
        let t = Tensor::new(s, out)?;
        self.push(t, Op::BroadcastTo(a))
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = split_axis(v.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for j in 0..inner {
                    out[o * inner + j] += v.data()[(o * len + k) * inner + j];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| shape_err(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Maximum along `axis`, keeping it with length 1. Ties go to the first.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = split_axis(v.shape(), axis)?;
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for j in 0..inner {
                    let src = (o * len + k) * inner + j;
                    if v.data()[src] > out[o * inner + j] {
                        out[o * inner + j] = v.data()[src];
                        argmax[o * inner + j] = src;
                    }
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::MaxAxis { x, argmax })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, total, inner) = split_axis(v.shape(), axis)?;
        if len == 0 || start + len > total {
            return Err(shape_err(format!("slice {start}..{} of axis length {total}", start + len)));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * total + start) * inner;
            out.extend_from_slice(&v.data()[src..src + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(shape_err(format!("concat {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// 2-D convolution with "same" zero padding `floor(extent/2)`.
    ///
    /// Integer scalar dilations take the direct path and support `stride` and
    /// `groups`. Fractional scalars and per-position maps sample the input
    /// bilinearly at `p + Δk · d(p)` and require stride 1, one group.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: Dilation,
        groups: usize,
    ) -> Result<Var> {
        let y = match dilation {
            Dilation::Scalar(d) if d <= 0.0 || !d.is_finite() => {
                return Err(Error::InvalidArgument(format!("dilation must be positive, got {d}")))
            }
            Dilation::Scalar(d) if d.fract() == 0.0 => {
                let geom =
                    ConvGeom::new(self.shape(x), self.shape(w), stride, d as usize, groups)?;
                let out = conv::conv_forward(&geom, self.value(x).data(), self.value(w).data());
                let t = Tensor::new(geom.out_shape().to_vec(), out)?;
                self.push(t, Op::Conv2d { x, w, geom })?
            }
            Dilation::Scalar(d) => {
                let (n, _, h, wd) = self.value(x).dims4()?;
                let map = self.constant(Tensor::full([n, 1, h, wd], d));
                self.sampled_conv(x, w, map, stride, groups)?
            }
            Dilation::Map(map) => {
                if self.value(map).data().iter().any(|&d| d < 0.0) {
                    return Err(Error::InvalidArgument("negative dilation in map".into()));
                }
                self.sampled_conv(x, w, map, stride, groups)?
            }
        };
        match bias {
            Some(b) => self.add_channel_bias(y, b),
            None => Ok(y),
        }
    }

    fn sampled_conv(&mut self, x: Var, w: Var, map: Var, stride: usize, groups: usize) -> Result<Var> {
        if stride != 1 || groups != 1 {
            return Err(Error::InvalidArgument(
                "fractional dilation supports stride 1 and one group only".into(),
            ));
        }
        self.modulated_conv(x, w, None, map)
    }

    /// Frequency-modulated sampling convolution:
    /// `y_o(p) = Σ_{c,k} (w_low + λ(p)·w_high)[o,c,k] · x_c(p + Δk·d(p))`.
    ///
    /// `high` carries `(w_high, λ)` with `λ` shaped `N × 1 × H × W`. A
    /// zero `d(p)` collapses every tap onto `p`.
    pub fn modulated_conv(
        &mut self,
        x: Var,
        w_low: Var,
        high: Option<(Var, Var)>,
        dil: Var,
    ) -> Result<Var> {
        let geom = SampleGeom::new(self.shape(x), self.shape(w_low), self.shape(dil))?;
        if let Some((wh, lam)) = high {
            if self.shape(wh) != self.shape(w_low) {
                return Err(shape_err("w_high must match w_low"));
            }
            if self.shape(lam) != self.shape(dil) {
                return Err(shape_err("lambda map must match the dilation map"));
            }
        }
        let hv = high.map(|(wh, lam)| (self.value(wh).data(), self.value(lam).data()));
        let out = conv::sample_forward(
            &geom,
            self.value(x).data(),
            self.value(w_low).data(),
            hv,
            self.value(dil).data(),
        );
        let t = Tensor::new(geom.out_shape().to_vec(), out)?;
        self.push(t, Op::SampleConv { x, w_low, high, dil, geom })
    }

    /// Add a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(b).iter().product::<usize>();
        let b4 = self.reshape(b, &[1, c, 1, 1])?;
        self.add(x, b4)
    }

    /// Unnormalized 2-D DFT over the complex tensor `[..., H, W, 2]`.
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let t = super::fft::fft2_complex(self.value(x), false)?;
        self.push(t, Op::Fft2 { x, inverse: false })
    }

    /// Inverse of [`Tape::fft2`], including the `1/(H·W)` factor.
    pub fn ifft2(&mut self, x: Var) -> Result<Var> {
        let t = super::fft::fft2_complex(self.value(x), true)?;
        self.push(t, Op::Fft2 { x, inverse: true })
    }

    /// Fourier band split of `[N, C, H, W]` into `[N, B, C, H, W]` with
    /// `X_b = Re F⁻¹(M_b · F(X))`. Masks must be real and symmetric under
    /// frequency negation; the caller validates that.
    pub fn band_split(&mut self, x: Var, masks: Arc<Vec<Vec<f64>>>) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        if masks.is_empty() || masks.iter().any(|m| m.len() != h * w) {
            return Err(shape_err(format!("band masks must each hold {h}x{w} values")));
        }
        let t = band_split(self.value(x), &masks)?;
        self.push(t, Op::BandSplit { x, masks })
    }

    /// Orthonormal one-level Haar analysis, `[N, C, H, W] → [N, 4C, H/2, W/2]`.
    pub fn haar(&mut self, x: Var) -> Result<Var> {
        let t = haar_forward(self.value(x))?;
        self.push(t, Op::Haar { x, inverse: false })
    }

    pub fn haar_inverse(&mut self, x: Var) -> Result<Var> {
        let t = haar_inverse(self.value(x))?;
        self.push(t, Op::Haar { x, inverse: true })
    }

    /// Training-mode batch norm over (N, H, W) per channel.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4()?;
        check_channel_param(self.shape(gamma), c)?;
        check_channel_param(self.shape(beta), c)?;
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        for_each_nchw(n, c, h * w, |i, ch| mean[ch] += v.data()[i]);
        mean.iter_mut().for_each(|s| *s /= m);
        let mut var = vec![0.0; c];
        for_each_nchw(n, c, h * w, |i, ch| var[ch] += (v.data()[i] - mean[ch]).powi(2));
        var.iter_mut().for_each(|s| *s /= m);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; v.numel()];
        let mut out = vec![0.0; v.numel()];
        for_each_nchw(n, c, h * w, |i, ch| {
            xhat[i] = (v.data()[i] - mean[ch]) * inv_std[ch];
            out[i] = gd[ch] * xhat[i] + bd[ch];
        });
        let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let stats = BatchStats { mean, var: var.iter().map(|s| s * unbiased).collect() };
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let y = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std })?;
        Ok((y, stats))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batchnorm_inference(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4()?;
        check_channel_param(self.shape(gamma), c)?;
        check_channel_param(self.shape(beta), c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err(format!("running statistics must have {c} entries")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; v.numel()];
        let mut out = vec![0.0; v.numel()];
        for_each_nchw(n, c, h * w, |i, ch| {
            xhat[i] = (v.data()[i] - running_mean[ch]) * inv_std[ch];
            out[i] = gd[ch] * xhat[i] + bd[ch];
        });
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::BatchNormEval { x, gamma, beta, xhat, inv_std })
    }

    /// Inverted dropout. In training mode each element survives with
    /// probability `1 - p` and is scaled by `1/(1 - p)`; the mask comes from
    /// the `seed`/`stream` substream. Evaluation mode is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64, stream: &str) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout p must be in [0, 1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut r = rng::substream(seed, stream);
        let keep = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> =
            (0..v.numel()).map(|_| if r.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::Dropout { x, mask })
    }

    /// Mean class-balanced focal loss of `logits` against 0/1 `labels`.
    pub fn focal_loss(&mut self, logits: Var, labels: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        let l = crate::loss::focal_loss(self.value(logits).data(), labels, alpha, gamma)?;
        self.push(
            Tensor::scalar(l),
            Op::FocalLoss { logits, labels: labels.to_vec(), alpha, gamma },
        )
    }
}

fn check_channel_param(s: &[usize], c: usize) -> Result<()> {
    if s != [c] {
        return Err(shape_err(format!("per-channel parameter has shape {s:?}, expected [{c}]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vals(t: &Tape, v: Var) -> Vec<f64> {
        t.value(v).data().to_vec()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([3]));
        let y = t.softmax(x, 0).unwrap();
        for v in vals(&t, y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(t.softmax(x, 1).is_err());
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([2], vec![-2.5, 3.0]).unwrap());
        let y = t.relu(x).unwrap();
        assert_eq!(vals(&t, y), vec![0.0, 3.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([1000], 1.0));
        assert_eq!(t.dropout(x, 0.2, false, 1, "d").unwrap(), x);
        let a = t.dropout(x, 0.2, true, 1, "d").unwrap();
        let b = t.dropout(x, 0.2, true, 1, "d").unwrap();
        assert_eq!(vals(&t, a), vals(&t, b));
        let kept = vals(&t, a).iter().filter(|&&v| v > 0.0).count();
        assert!((700..900).contains(&kept));
        assert!(vals(&t, a).iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        assert!(t.dropout(x, 1.0, true, 1, "d").is_err());
        assert!(t.dropout(x, -0.1, true, 1, "d").is_err());
    }

    #[test]
    fn conv_of_ones() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = t.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, w, None, 1, Dilation::Scalar(1.0), 1).unwrap();
        assert_eq!(t.value(y).data()[4], 9.0);
        assert_eq!(t.value(y).data()[0], 4.0);
    }

    #[test]
    fn conv_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 2, 5, 5]));
        let w = t.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(
            t.conv2d(x, w, None, 1, Dilation::Scalar(1.0), 1),
            Err(Error::Shape(_))
        ));
        let w2 = t.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(t.conv2d(x, w2, None, 1, Dilation::Scalar(0.0), 1).is_err());
        assert!(t.conv2d(x, w2, None, 1, Dilation::Scalar(-1.0), 1).is_err());
        assert!(t.conv2d(x, w2, None, 2, Dilation::Scalar(1.5), 1).is_err());
    }

    #[test]
    fn strided_conv_shape() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 3, 64, 64]));
        let w = t.constant(Tensor::zeros([5, 3, 3, 3]));
        let y = t.conv2d(x, w, None, 2, Dilation::Scalar(1.0), 1).unwrap();
        assert_eq!(t.shape(y), &[2, 5, 32, 32]);
    }

    #[test]
    fn finite_checks_raise() {
        let mut t = Tape::new().with_finite_checks(true);
        let x = t.constant(Tensor::full([2], f64::MAX));
        assert!(matches!(t.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros([3]));
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(_))));
    }
}
