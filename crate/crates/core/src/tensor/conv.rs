//! Convolution kernels on raw buffers.
//!
//! Two families: a direct strided/dilated/grouped convolution with integer
//! dilation, and a stride-1 "sampling" convolution whose taps sit at
//! `p + Δk · d(p)` for a per-position real dilation `d(p)`, read by bilinear
//! interpolation with zeros outside the image.

use crate::error::{shape_err, Result};

/// Zero padding that keeps `H × W` at stride 1 for an odd kernel.
pub fn same_padding(k: usize, dilation: usize) -> usize {
    (dilation * (k - 1) + 1) / 2
}

/// Dilation argument for [`crate::tensor::Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dilation {
    /// One rate for every position. Integer values take the direct path.
    Scalar(f64),
    /// Per-position rate map `N × 1 × H × W`, differentiable.
    Map(super::Var),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        wshape: &[usize],
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, c_in, h, w] = x[..] else {
            return Err(shape_err(format!("conv2d input must be NCHW, got {x:?}")));
        };
        let [c_out, c_per_group, k, k2] = wshape[..] else {
            return Err(shape_err(format!("conv2d weight must be OIKK, got {wshape:?}")));
        };
        if k != k2 || k % 2 == 0 {
            return Err(shape_err(format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_in / groups != c_per_group
        {
            return Err(shape_err(format!(
                "channel mismatch: input has {c_in} channels, weight expects {c_per_group} per \
                 group with {groups} groups"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(shape_err("stride and dilation must be positive".to_string()));
        }
        let pad = same_padding(k, dilation);
        let extent = dilation * (k - 1) + 1;
        if h + 2 * pad < extent || w + 2 * pad < extent {
            return Err(shape_err(format!("kernel extent {extent} exceeds padded input {h}x{w}")));
        }
        let oh = (h + 2 * pad - extent) / stride + 1;
        let ow = (w + 2 * pad - extent) / stride + 1;
        Ok(ConvGeom { n, c_in, h, w, c_out, k, stride, dilation, pad, groups, oh, ow })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.oh, self.ow]
    }

    /// Output columns whose input column `ox*stride + off - pad` is in range.
    fn col_range(&self, off: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = off as isize - self.pad as isize;
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi = ((self.w as isize - 1 - shift).div_euclid(s) + 1).clamp(0, self.ow as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn in_row(&self, oy: usize, off: usize) -> Option<usize> {
        let iy = (oy * self.stride + off) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Patch matrix `[cpg_in·k·k, oh·ow]` of one sample and group.
    fn im2col(&self, x: &[f64], n: usize, grp: usize, col: &mut [f64]) {
        let cpg_in = self.c_in / self.groups;
        let p = self.oh * self.ow;
        let mut r = 0;
        for ci in 0..cpg_in {
            let c = grp * cpg_in + ci;
            let plane = &x[(n * self.c_in + c) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let dst = &mut col[r * p..(r + 1) * p];
                    dst.fill(0.0);
                    let (lo, hi) = self.col_range(kj * self.dilation);
                    let base = (kj * self.dilation) as isize - self.pad as isize;
                    for oy in 0..self.oh {
                        let Some(iy) = self.in_row(oy, ki * self.dilation) else { continue };
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 {
                            let start = (lo as isize + base) as usize;
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                out[ox] = src[((ox * self.stride) as isize + base) as usize];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Scatter-add a patch-matrix gradient back onto the input planes.
    fn col2im(&self, col: &[f64], n: usize, grp: usize, gx: &mut [f64]) {
        let cpg_in = self.c_in / self.groups;
        let p = self.oh * self.ow;
        let mut r = 0;
        for ci in 0..cpg_in {
            let c = grp * cpg_in + ci;
            let plane = &mut gx[(n * self.c_in + c) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let src = &col[r * p..(r + 1) * p];
                    let (lo, hi) = self.col_range(kj * self.dilation);
                    let base = (kj * self.dilation) as isize - self.pad as isize;
                    for oy in 0..self.oh {
                        let Some(iy) = self.in_row(oy, ki * self.dilation) else { continue };
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let g = &src[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 {
                            let start = (lo as isize + base) as usize;
                            for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&g[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for ox in lo..hi {
                                dst[((ox * self.stride) as isize + base) as usize] += g[ox];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Convolution without bias. Per output element, products are accumulated
/// in (input channel, kernel row, kernel column) order.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let p = g.oh * g.ow;
    let (cpg_in, cpg_out) = (g.c_in / g.groups, g.c_out / g.groups);
    let r = cpg_in * g.k * g.k;
    let mut out = vec![0.0; g.n * g.c_out * p];
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { r * p }];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let wg = &w[grp * cpg_out * r..(grp + 1) * cpg_out * r];
            let og = &mut out[(n * g.c_out + grp * cpg_out) * p..][..cpg_out * p];
            if g.is_pointwise() {
                let xg = &x[(n * g.c_in + grp * cpg_in) * p..][..cpg_in * p];
                super::gemm::gemm_nn(cpg_out, r, p, wg, xg, og);
            } else {
                g.im2col(x, n, grp, &mut col);
                super::gemm::gemm_nn(cpg_out, r, p, wg, &col, og);
            }
        }
    }
    out
}

pub(crate) fn conv_backward_input(g: &ConvGeom, gout: &[f64], w: &[f64]) -> Vec<f64> {
    let p = g.oh * g.ow;
    let (cpg_in, cpg_out) = (g.c_in / g.groups, g.c_out / g.groups);
    let r = cpg_in * g.k * g.k;
    let mut gx = vec![0.0; g.n * g.c_in * g.h * g.w];
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { r * p }];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let wg = &w[grp * cpg_out * r..(grp + 1) * cpg_out * r];
            let gg = &gout[(n * g.c_out + grp * cpg_out) * p..][..cpg_out * p];
            if g.is_pointwise() {
                let dst = &mut gx[(n * g.c_in + grp * cpg_in) * p..][..cpg_in * p];
                super::gemm::gemm_tn(cpg_out, r, p, wg, gg, dst);
            } else {
                col.fill(0.0);
                super::gemm::gemm_tn(cpg_out, r, p, wg, gg, &mut col);
                g.col2im(&col, n, grp, &mut gx);
            }
        }
    }
    gx
}

pub(crate) fn conv_backward_weight(g: &ConvGeom, gout: &[f64], x: &[f64]) -> Vec<f64> {
    let p = g.oh * g.ow;
    let (cpg_in, cpg_out) = (g.c_in / g.groups, g.c_out / g.groups);
    let r = cpg_in * g.k * g.k;
    let mut gw = vec![0.0; g.c_out * r];
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { r * p }];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let gg = &gout[(n * g.c_out + grp * cpg_out) * p..][..cpg_out * p];
            let dst = &mut gw[grp * cpg_out * r..(grp + 1) * cpg_out * r];
            if g.is_pointwise() {
                let xg = &x[(n * g.c_in + grp * cpg_in) * p..][..cpg_in * p];
                super::gemm::gemm_nt(cpg_out, r, p, gg, xg, dst);
            } else {
                g.im2col(x, n, grp, &mut col);
                super::gemm::gemm_nt(cpg_out, r, p, gg, &col, dst);
            }
        }
    }
    gw
}

// ---------------------------------------------------------------------------
// Sampling convolution

#[derive(Debug, Clone, Copy)]
pub(crate) struct SampleGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
}

impl SampleGeom {
    pub fn new(x: &[usize], wshape: &[usize], dil: &[usize]) -> Result<Self> {
        let [n, c, h, w] = x[..] else {
            return Err(shape_err(format!("input must be NCHW, got {x:?}")));
        };
        let [o, ci, k, k2] = wshape[..] else {
            return Err(shape_err(format!("weight must be OIKK, got {wshape:?}")));
        };
        if ci != c {
            return Err(shape_err(format!("channel mismatch: input {c}, weight {ci}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(shape_err(format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if dil != [n, 1, h, w] {
            return Err(shape_err(format!("dilation map {dil:?} must be [{n}, 1, {h}, {w}]")));
        }
        Ok(SampleGeom { n, c, h, w, o, k })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.h, self.w]
    }
}

/// One bilinear tap: four corner offsets into a plane (`usize::MAX` when
/// outside), their interpolation weights, and d(weight)/d(dilation).
#[derive(Debug, Clone, Copy)]
struct Tap {
    idx: [usize; 4],
    wt: [f64; 4],
    dwd: [f64; 4],
}

fn fill_taps(taps: &mut [Tap], y: usize, x: usize, d: f64, k: usize, h: usize, w: usize) {
    let r = (k / 2) as isize;
    for (t, tap) in taps.iter_mut().enumerate() {
        let dy = (t / k) as isize - r;
        let dx = (t % k) as isize - r;
        let sy = y as f64 + dy as f64 * d;
        let sx = x as f64 + dx as f64 * d;
        let y0 = sy.floor();
        let x0 = sx.floor();
        let fy = sy - y0;
        let fx = sx - x0;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
        let wt = [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx];
        let dfy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
        let dfx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
        for j in 0..4 {
            let (cy, cx) = corners[j];
            let inside = cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize;
            tap.idx[j] = if inside { cy as usize * w + cx as usize } else { usize::MAX };
            tap.wt[j] = wt[j];
            tap.dwd[j] = dy as f64 * dfy[j] + dx as f64 * dfx[j];
        }
    }
}

#[inline]
fn sample(plane: &[f64], tap: &Tap) -> f64 {
    let mut v = 0.0;
    for j in 0..4 {
        if tap.idx[j] != usize::MAX {
            v += tap.wt[j] * plane[tap.idx[j]];
        }
    }
    v
}

/// Sampled patch matrix `[c·k·k, h·w]` of one sample.
fn sample_col(g: &SampleGeom, x: &[f64], n: usize, dil: &[f64], taps: &mut [Tap], col: &mut [f64]) {
    let kk = g.k * g.k;
    let hw = g.h * g.w;
    let planes = &x[n * g.c * hw..(n + 1) * g.c * hw];
    for y in 0..g.h {
        for xx in 0..g.w {
            let p = y * g.w + xx;
            fill_taps(taps, y, xx, dil[p], g.k, g.h, g.w);
            for c in 0..g.c {
                let plane = &planes[c * hw..(c + 1) * hw];
                for (t, tap) in taps.iter().enumerate() {
                    col[(c * kk + t) * hw + p] = sample(plane, tap);
                }
            }
        }
    }
}

/// `out[o](p) = Σ_{c,k} (w_low[o,c,k] + λ(p)·w_high[o,c,k]) · X_c(p + Δk·d(p))`,
/// evaluated as `W_low·P + λ ⊙ (W_high·P)` over the sampled patch matrix `P`.
/// Without `w_high`/`lambda` only the first term is used.
pub(crate) fn sample_forward(
    g: &SampleGeom,
    x: &[f64],
    w_low: &[f64],
    high: Option<(&[f64], &[f64])>,
    dil: &[f64],
) -> Vec<f64> {
    let kk = g.k * g.k;
    let hw = g.h * g.w;
    let row = g.c * kk;
    let mut out = vec![0.0; g.n * g.o * hw];
    let mut col = vec![0.0; row * hw];
    let mut hi = vec![0.0; if high.is_some() { g.o * hw } else { 0 }];
    let mut taps = vec![Tap { idx: [0; 4], wt: [0.0; 4], dwd: [0.0; 4] }; kk];
    for n in 0..g.n {
        sample_col(g, x, n, &dil[n * hw..(n + 1) * hw], &mut taps, &mut col);
        let on = &mut out[n * g.o * hw..(n + 1) * g.o * hw];
        super::gemm::gemm_nn(g.o, row, hw, w_low, &col, on);
        if let Some((w_high, lam)) = high {
            hi.fill(0.0);
            super::gemm::gemm_nn(g.o, row, hw, w_high, &col, &mut hi);
            let lam = &lam[n * hw..(n + 1) * hw];
            for (orow, hrow) in on.chunks_exact_mut(hw).zip(hi.chunks_exact(hw)) {
                for ((o, &h), &l) in orow.iter_mut().zip(hrow).zip(lam) {
                    *o += l * h;
                }
            }
        }
    }
    out
}

pub(crate) struct SampleGrads {
    pub x: Vec<f64>,
    pub w_low: Vec<f64>,
    pub w_high: Vec<f64>,
    pub lambda: Vec<f64>,
    pub dil: Vec<f64>,
}

pub(crate) fn sample_backward(
    g: &SampleGeom,
    gout: &[f64],
    x: &[f64],
    w_low: &[f64],
    high: Option<(&[f64], &[f64])>,
    dil: &[f64],
) -> SampleGrads {
    let kk = g.k * g.k;
    let hw = g.h * g.w;
    let row = g.c * kk;
    let mut gr = SampleGrads {
        x: vec![0.0; x.len()],
        w_low: vec![0.0; w_low.len()],
        w_high: vec![0.0; if high.is_some() { w_low.len() } else { 0 }],
        lambda: vec![0.0; if high.is_some() { g.n * hw } else { 0 }],
        dil: vec![0.0; g.n * hw],
    };
    let mut col = vec![0.0; row * hw];
    let mut gcol = vec![0.0; row * hw];
    let mut hi = vec![0.0; if high.is_some() { g.o * hw } else { 0 }];
    let mut gh = vec![0.0; if high.is_some() { g.o * hw } else { 0 }];
    let mut taps = vec![Tap { idx: [0; 4], wt: [0.0; 4], dwd: [0.0; 4] }; kk];
    for n in 0..g.n {
        let dn = &dil[n * hw..(n + 1) * hw];
        sample_col(g, x, n, dn, &mut taps, &mut col);
        let gn = &gout[n * g.o * hw..(n + 1) * g.o * hw];
        gcol.fill(0.0);
        super::gemm::gemm_nt(g.o, row, hw, gn, &col, &mut gr.w_low);
        super::gemm::gemm_tn(g.o, row, hw, w_low, gn, &mut gcol);
        if let Some((w_high, lam)) = high {
            let lam = &lam[n * hw..(n + 1) * hw];
            hi.fill(0.0);
            super::gemm::gemm_nn(g.o, row, hw, w_high, &col, &mut hi);
            let gl = &mut gr.lambda[n * hw..(n + 1) * hw];
            for ((grow, hrow), ghrow) in gn.chunks_exact(hw).zip(hi.chunks_exact(hw)).zip(gh.chunks_exact_mut(hw)) {
                for p in 0..hw {
                    gl[p] += grow[p] * hrow[p];
                    ghrow[p] = grow[p] * lam[p];
                }
            }
            super::gemm::gemm_nt(g.o, row, hw, &gh, &col, &mut gr.w_high);
            super::gemm::gemm_tn(g.o, row, hw, w_high, &gh, &mut gcol);
        }
        let xn = &x[n * g.c * hw..(n + 1) * g.c * hw];
        let gxn = &mut gr.x[n * g.c * hw..(n + 1) * g.c * hw];
        let gd = &mut gr.dil[n * hw..(n + 1) * hw];
        for y in 0..g.h {
            for xx in 0..g.w {
                let p = y * g.w + xx;
                fill_taps(&mut taps, y, xx, dn[p], g.k, g.h, g.w);
                let mut acc = 0.0;
                for c in 0..g.c {
                    let xp = &xn[c * hw..(c + 1) * hw];
                    let gx = &mut gxn[c * hw..(c + 1) * hw];
                    for (t, tap) in taps.iter().enumerate() {
                        let gp = gcol[(c * kk + t) * hw + p];
                        if gp == 0.0 {
                            continue;
                        }
                        for j in 0..4 {
                            if tap.idx[j] != usize::MAX {
                                gx[tap.idx[j]] += gp * tap.wt[j];
                                acc += gp * tap.dwd[j] * xp[tap.idx[j]];
                            }
                        }
                    }
                }
                gd[p] = acc;
            }
        }
    }
    gr
}
