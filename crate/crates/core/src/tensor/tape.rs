use std::sync::Arc;

use super::conv::{self, ConvGeom, SampleGeom};
use super::fft::Fft2Plan;
use super::shape::{for_each_broadcast, split_axis, sum_to};
use super::Tensor;
use crate::error::{Error, Result};

/// Environment variable that turns on finite-value checks after every op.
pub const CHECK_FINITE_ENV: &str = "FREQDETECT_CHECK_FINITE";

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-average updates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    MatMul { a: Var, b: Var },
    TransposeLast2(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumAxis { x: Var, axis: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    SumAll(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    SampleConv { x: Var, w_low: Var, high: Option<(Var, Var)>, dil: Var, geom: SampleGeom },
    Fft2 { x: Var, inverse: bool },
    BandSplit { x: Var, masks: Arc<Vec<Vec<f64>>> },
    Haar { x: Var, inverse: bool },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    FocalLoss { logits: Var, labels: Vec<f64>, alpha: f64, gamma: f64 },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::MatMul { .. } => "matmul",
            Op::TransposeLast2(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::SumAll(_) => "sum",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::SampleConv { .. } => "sample_conv",
            Op::Fft2 { .. } => "fft2",
            Op::BandSplit { .. } => "band_split",
            Op::Haar { .. } => "haar",
            Op::BatchNorm { .. } => "batchnorm",
            Op::BatchNormEval { .. } => "batchnorm_inference",
            Op::Dropout { .. } => "dropout",
            Op::FocalLoss { .. } => "focal_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Ordered record of executed operations.
///
/// A tape belongs to one forward/backward pass. It is not `Sync`-shared;
/// parallel workers each build their own.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    guided_relu: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// New tape; finite checks follow the `FREQDETECT_CHECK_FINITE` variable.
    pub fn new() -> Self {
        let check = std::env::var(CHECK_FINITE_ENV).map(|v| v != "0" && !v.is_empty()).unwrap_or(false);
        Tape { nodes: Vec::new(), check_finite: check, guided_relu: false }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Guided-backpropagation mode: ReLU adjoints also drop negative
    /// upstream gradients.
    pub fn with_guided_relu(mut self, on: bool) -> Self {
        self.guided_relu = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, is_param: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, is_param: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, is_param: false });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let adj = self.adjoint(i, &op, g)?;
            for (input, gi) in adj {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            // intermediates are not needed once their adjoint has run
            self.nodes[i].value = Tensor::scalar(0.0);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| if node.is_param { g.or_else(|| Some(Tensor::zeros(node.value.shape().to_vec()))) } else { None })
            .collect();
        Ok(Gradients { grads })
    }

    fn adjoint(&self, i: usize, op: &Op, g: Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = &self.nodes[i].value;
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                vec![(*a, sum_to(&g, val(*a).shape())), (*b, sum_to(&g, val(*b).shape()))]
            }
            Op::Sub(a, b) => {
                let gb = sum_to(&g, val(*b).shape()).map(|v| -v);
                vec![(*a, sum_to(&g, val(*a).shape())), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut res = vec![];
                if needs(*a) {
                    let mut ga = vec![0.0; g.numel()];
                    for_each_broadcast(g.shape(), va.shape(), vb.shape(), |o, _, ib| {
                        ga[o] = g.data()[o] * vb.data()[ib]
                    });
                    res.push((*a, sum_to(&Tensor::new(g.shape().to_vec(), ga)?, va.shape())));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; g.numel()];
                    for_each_broadcast(g.shape(), va.shape(), vb.shape(), |o, ia, _| {
                        gb[o] = g.data()[o] * va.data()[ia]
                    });
                    res.push((*b, sum_to(&Tensor::new(g.shape().to_vec(), gb)?, vb.shape())));
                }
                res
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::Relu(a) => {
                let x = val(*a);
                let guided = self.guided_relu;
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 && (!guided || gv > 0.0) { gv } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Sigmoid(a) => {
                let data = out.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                vec![(*a, Tensor::new(out.shape().to_vec(), data)?)]
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis)?;
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + j;
                        let dot: f64 = (0..len).map(|k| y[at(k)] * gd[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(out.shape().to_vec(), gx)?)]
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let mut res = vec![];
                if needs(*a) {
                    let bt = transpose_last2(vb);
                    let ga = batched_matmul(&g, &bt)?;
                    res.push((*a, reduce_batch(ga, va.shape())));
                }
                if needs(*b) {
                    let at = transpose_last2(va);
                    let gb = batched_matmul(&at, &g)?;
                    res.push((*b, reduce_batch(gb, vb.shape())));
                }
                res
            }
            Op::TransposeLast2(a) => vec![(*a, transpose_last2(&g))],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec())?)],
            Op::BroadcastTo(a) => vec![(*a, sum_to(&g, val(*a).shape()))],
            Op::SumAxis { x, axis } => {
                let xs = val(*x).shape();
                let (outer, len, inner) = split_axis(xs, *axis)?;
                let mut gx = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    for k in 0..len {
                        for j in 0..inner {
                            gx[(o * len + k) * inner + j] = g.data()[o * inner + j];
                        }
                    }
                }
                vec![(*x, Tensor::new(xs.to_vec(), gx)?)]
            }
            Op::MaxAxis { x, argmax, .. } => {
                let xs = val(*x).shape();
                let mut gx = vec![0.0; xs.iter().product()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                vec![(*x, Tensor::new(xs.to_vec(), gx)?)]
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), gv))]
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, len, inner) = split_axis(xs, *axis)?;
                let take = g.shape()[*axis];
                let mut gx = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    gx[dst..dst + take * inner]
                        .copy_from_slice(&g.data()[o * take * inner..(o + 1) * take * inner]);
                }
                vec![(*x, Tensor::new(xs.to_vec(), gx)?)]
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis)?;
                let mut res = vec![];
                let mut offset = 0;
                for &x in xs {
                    let xs_shape = val(x).shape();
                    let len = xs_shape[*axis];
                    if needs(x) {
                        let mut gx = Vec::with_capacity(val(x).numel());
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gx.extend_from_slice(&g.data()[src..src + len * inner]);
                        }
                        res.push((x, Tensor::new(xs_shape.to_vec(), gx)?));
                    }
                    offset += len;
                }
                res
            }
            Op::Conv2d { x, w, geom } => {
                let mut res = vec![];
                if needs(*x) {
                    let gx = conv::conv_backward_input(geom, g.data(), val(*w).data());
                    res.push((*x, Tensor::new(val(*x).shape().to_vec(), gx)?));
                }
                if needs(*w) {
                    let gw = conv::conv_backward_weight(geom, g.data(), val(*x).data());
                    res.push((*w, Tensor::new(val(*w).shape().to_vec(), gw)?));
                }
                res
            }
            Op::SampleConv { x, w_low, high, dil, geom } => {
                let hv = high.map(|(wh, lam)| (val(wh).data(), val(lam).data()));
                let gr = conv::sample_backward(
                    geom,
                    g.data(),
                    val(*x).data(),
                    val(*w_low).data(),
                    hv,
                    val(*dil).data(),
                );
                let mut res = vec![
                    (*x, Tensor::new(val(*x).shape().to_vec(), gr.x)?),
                    (*w_low, Tensor::new(val(*w_low).shape().to_vec(), gr.w_low)?),
                    (*dil, Tensor::new(val(*dil).shape().to_vec(), gr.dil)?),
                ];
                if let Some((wh, lam)) = high {
                    res.push((*wh, Tensor::new(val(*wh).shape().to_vec(), gr.w_high)?));
                    res.push((*lam, Tensor::new(val(*lam).shape().to_vec(), gr.lambda)?));
                }
                res
            }
            Op::Fft2 { x, inverse } => {
                let s = g.shape();
                let hw = (s[s.len() - 3] * s[s.len() - 2]) as f64;
                // adjoint of the unnormalized DFT is H·W times its inverse
                let gx = super::fft::fft2_complex(&g, !inverse)?;
                let factor = if *inverse { 1.0 / hw } else { hw };
                vec![(*x, gx.map(|v| v * factor))]
            }
            Op::BandSplit { x, masks } => {
                let xs = val(*x).shape();
                vec![(*x, band_merge(&g, masks, xs)?)]
            }
            Op::Haar { x, inverse } => {
                let gx = if *inverse { haar_forward(&g)? } else { haar_inverse(&g)? };
                vec![(*x, gx)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = g.dims4()?;
                let m = (n * h * w) as f64;
                let gam = val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for_each_nchw(n, c, h * w, |i, ch| {
                    sum_g[ch] += g.data()[i];
                    sum_gx[ch] += g.data()[i] * xhat[i];
                });
                let mut gx = vec![0.0; g.numel()];
                for_each_nchw(n, c, h * w, |i, ch| {
                    gx[i] = gam[ch] * inv_std[ch] / m
                        * (m * g.data()[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                });
                vec![
                    (*x, Tensor::new(g.shape().to_vec(), gx)?),
                    (*gamma, Tensor::new(vec![c], sum_gx)?),
                    (*beta, Tensor::new(vec![c], sum_g)?),
                ]
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = g.dims4()?;
                let gam = val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                let mut gx = vec![0.0; g.numel()];
                for_each_nchw(n, c, h * w, |i, ch| {
                    sum_g[ch] += g.data()[i];
                    sum_gx[ch] += g.data()[i] * xhat[i];
                    gx[i] = g.data()[i] * gam[ch] * inv_std[ch];
                });
                vec![
                    (*x, Tensor::new(g.shape().to_vec(), gx)?),
                    (*gamma, Tensor::new(vec![c], sum_gx)?),
                    (*beta, Tensor::new(vec![c], sum_g)?),
                ]
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::FocalLoss { logits, labels, alpha, gamma } => {
                let z = val(*logits);
                let gz = crate::loss::focal_loss_grad(z.data(), labels, *alpha, *gamma)?;
                let scale = g.data()[0];
                vec![(*logits, Tensor::new(z.shape().to_vec(), gz)?.map(|v| v * scale))]
            }
        })
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b } => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::TransposeLast2(a)
        | Op::Reshape(a)
        | Op::BroadcastTo(a)
        | Op::SumAll(a) => vec![*a],
        Op::Softmax { x, .. }
        | Op::SumAxis { x, .. }
        | Op::MaxAxis { x, .. }
        | Op::Slice { x, .. }
        | Op::Fft2 { x, .. }
        | Op::BandSplit { x, .. }
        | Op::Haar { x, .. }
        | Op::Dropout { x, .. } => vec![*x],
        Op::FocalLoss { logits, .. } => vec![*logits],
        Op::Concat { xs, .. } => xs.clone(),
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::SampleConv { x, w_low, high, dil, .. } => {
            let mut v = vec![*x, *w_low, *dil];
            if let Some((wh, lam)) = high {
                v.extend([*wh, *lam]);
            }
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
            vec![*x, *gamma, *beta]
        }
    }
}

pub(crate) fn for_each_nchw(n: usize, c: usize, hw: usize, mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    for _ in 0..n {
        for ch in 0..c {
            for _ in 0..hw {
                f(i, ch);
                i += 1;
            }
        }
    }
}

/// Gradients of a loss with respect to every [`Tape::param`] leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

// ---------------------------------------------------------------------------
// value-level helpers shared by forward and adjoint passes

pub(crate) fn transpose_last2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let batch = x.numel() / (m * n);
    let mut out = vec![0.0; x.numel()];
    for b in 0..batch {
        let src = &x.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor { shape, data: out }
}

/// `[B?, M, K] × [B?, K, N]`; a batch of 1 broadcasts. 2-D inputs give 2-D.
pub(crate) fn batched_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
        return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
    }
    let (ba, m, k) = if sa.len() == 3 { (sa[0], sa[1], sa[2]) } else { (1, sa[0], sa[1]) };
    let (bb, k2, n) = if sb.len() == 3 { (sb[0], sb[1], sb[2]) } else { (1, sb[0], sb[1]) };
    if k != k2 || !(ba == bb || ba == 1 || bb == 1) {
        return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
    }
    let batch = ba.max(bb);
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ad = &a.data()[(if ba == 1 { 0 } else { bi }) * m * k..][..m * k];
        let bd = &b.data()[(if bb == 1 { 0 } else { bi }) * k * n..][..k * n];
        let od = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut od[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }
    let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
    Tensor::new(shape, out)
}

fn reduce_batch(g: Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g;
    }
    // target batch was 1 and broadcast
    let s = g.shape();
    let per = s[1] * s[2];
    let mut out = vec![0.0; per];
    for chunk in g.data().chunks_exact(per) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor { shape: target.to_vec(), data: out }
}

/// Split `[N, C, H, W]` into radial bands: output `[N, B, C, H, W]`.
pub(crate) fn band_split(x: &Tensor, masks: &[Vec<f64>]) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let plan = Fft2Plan::new(h, w)?;
    let b = masks.len();
    let hw = h * w;
    let mut out = vec![0.0; n * b * c * hw];
    let (mut xr, mut xi) = (vec![0.0; hw], vec![0.0; hw]);
    let (mut yr, mut yi) = (vec![0.0; hw], vec![0.0; hw]);
    for ni in 0..n {
        for ci in 0..c {
            xr.copy_from_slice(&x.data()[(ni * c + ci) * hw..][..hw]);
            xi.fill(0.0);
            plan.process_split(&mut xr, &mut xi, false);
            // two real bands per inverse transform: F⁻¹(M₁X + i·M₂X) = x₁ + i·x₂
            for b0 in (0..b).step_by(2) {
                let m1 = &masks[b0];
                match masks.get(b0 + 1) {
                    Some(m2) => {
                        for k in 0..hw {
                            yr[k] = m1[k] * xr[k] - m2[k] * xi[k];
                            yi[k] = m1[k] * xi[k] + m2[k] * xr[k];
                        }
                    }
                    None => {
                        for k in 0..hw {
                            yr[k] = m1[k] * xr[k];
                            yi[k] = m1[k] * xi[k];
                        }
                    }
                }
                plan.process_split(&mut yr, &mut yi, true);
                out[((ni * b + b0) * c + ci) * hw..][..hw].copy_from_slice(&yr);
                if b0 + 1 < b {
                    out[((ni * b + b0 + 1) * c + ci) * hw..][..hw].copy_from_slice(&yi);
                }
            }
        }
    }
    Tensor::new(vec![n, b, c, h, w], out)
}

/// Adjoint of [`band_split`]: `Σ_b F⁻¹(M_b F(g_b))`.
fn band_merge(g: &Tensor, masks: &[Vec<f64>], xs: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let plan = Fft2Plan::new(h, w)?;
    let b = masks.len();
    let hw = h * w;
    let neg = |k: usize| ((h - k / w) % h) * w + (w - k % w) % w;
    let mut out = vec![0.0; n * c * hw];
    let (mut ar, mut ai) = (vec![0.0; hw], vec![0.0; hw]);
    let (mut zr, mut zi) = (vec![0.0; hw], vec![0.0; hw]);
    for ni in 0..n {
        for ci in 0..c {
            ar.fill(0.0);
            ai.fill(0.0);
            for b0 in (0..b).step_by(2) {
                let plane = |bi: usize| &g.data()[((ni * b + bi) * c + ci) * hw..][..hw];
                zr.copy_from_slice(plane(b0));
                match masks.get(b0 + 1) {
                    Some(_) => zi.copy_from_slice(plane(b0 + 1)),
                    None => zi.fill(0.0),
                }
                plan.process_split(&mut zr, &mut zi, false);
                // Z = G₁ + i·G₂ with G₁, G₂ the spectra of the two real planes
                let (m1, m2) = (&masks[b0], masks.get(b0 + 1));
                for k in 0..hw {
                    let j = neg(k);
                    let (g1r, g1i) = (0.5 * (zr[k] + zr[j]), 0.5 * (zi[k] - zi[j]));
                    ar[k] += m1[k] * g1r;
                    ai[k] += m1[k] * g1i;
                    if let Some(m2) = m2 {
                        let (g2r, g2i) = (0.5 * (zi[k] + zi[j]), -0.5 * (zr[k] - zr[j]));
                        ar[k] += m2[k] * g2r;
                        ai[k] += m2[k] * g2i;
                    }
                }
            }
            plan.process_split(&mut ar, &mut ai, true);
            out[(ni * c + ci) * hw..][..hw].copy_from_slice(&ar);
        }
    }
    Tensor::new(xs.to_vec(), out)
}

/// One-level orthonormal Haar analysis: `[N, C, H, W] → [N, 4C, H/2, W/2]`
/// with channel blocks ordered approximation, horizontal, vertical, diagonal.
pub(crate) fn haar_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("Haar transform needs even H and W, got {h}x{w}")));
    }
    let (hh, hw) = (h / 2, w / 2);
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let src = &d[(ni * c + ci) * h * w..][..h * w];
            for y in 0..hh {
                for xx in 0..hw {
                    let a = src[2 * y * w + 2 * xx];
                    let b = src[2 * y * w + 2 * xx + 1];
                    let cc = src[(2 * y + 1) * w + 2 * xx];
                    let dd = src[(2 * y + 1) * w + 2 * xx + 1];
                    let vals = [
                        (a + b + cc + dd) * 0.5,
                        (a - b + cc - dd) * 0.5,
                        (a + b - cc - dd) * 0.5,
                        (a - b - cc + dd) * 0.5,
                    ];
                    for (band, v) in vals.into_iter().enumerate() {
                        out[((ni * 4 * c + band * c + ci) * hh + y) * hw + xx] = v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, 4 * c, hh, hw], out)
}

pub(crate) fn haar_inverse(x: &Tensor) -> Result<Tensor> {
    let (n, c4, hh, hw) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::Shape(format!("inverse Haar needs 4·C channels, got {c4}")));
    }
    let c = c4 / 4;
    let (h, w) = (2 * hh, 2 * hw);
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..hh {
                for xx in 0..hw {
                    let at = |band: usize| d[((ni * c4 + band * c + ci) * hh + y) * hw + xx];
                    let (ll, lh, hl, hh_) = (at(0), at(1), at(2), at(3));
                    let dst = &mut out[(ni * c + ci) * h * w..][..h * w];
                    dst[2 * y * w + 2 * xx] = (ll + lh + hl + hh_) * 0.5;
                    dst[2 * y * w + 2 * xx + 1] = (ll - lh + hl - hh_) * 0.5;
                    dst[(2 * y + 1) * w + 2 * xx] = (ll + lh - hl - hh_) * 0.5;
                    dst[(2 * y + 1) * w + 2 * xx + 1] = (ll - lh - hl + hh_) * 0.5;
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
