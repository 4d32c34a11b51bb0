//! Frequency-aware blocks: Haar wavelet split, Fourier band selection,
//! frequency-adaptive dilated convolution and spatial attention.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::fft::{fft2, ifft2, real_part};
use crate::tensor::{Dilation, Tape, Tensor, Var};

// ---------------------------------------------------------------------------
// Haar

/// One-level Haar split of `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarBands {
    pub approx: Tensor,
    /// Horizontal, vertical and diagonal detail, each `[N, C, H/2, W/2]`.
    pub details: [Tensor; 3],
}

pub fn haar_dwt(x: &Tensor) -> Result<HaarBands> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.haar(v)?;
    let c = x.shape()[1];
    let mut band = |i: usize| -> Result<Tensor> {
        let s = t.slice(y, 1, i * c, c)?;
        Ok(t.value(s).clone())
    };
    Ok(HaarBands { approx: band(0)?, details: [band(1)?, band(2)?, band(3)?] })
}

pub fn haar_idwt(bands: &HaarBands) -> Result<Tensor> {
    let mut t = Tape::new();
    let parts: Vec<Var> = std::iter::once(&bands.approx)
        .chain(&bands.details)
        .map(|b| t.constant(b.clone()))
        .collect();
    let packed = t.concat(&parts, 1)?;
    let x = t.haar_inverse(packed)?;
    Ok(t.value(x).clone())
}

// ---------------------------------------------------------------------------
// Fourier bands

/// Binary frequency-plane masks forming an exact partition.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSpec {
    h: usize,
    w: usize,
    masks: Arc<Vec<Vec<f64>>>,
}

impl BandSpec {
    /// `b` equal-width annuli over the normalized radius
    /// `r = sqrt(f_u² + f_v²) ∈ [0, √2]`, where `f_u = min(u, H−u) / (H/2)`.
    /// Band 0 holds the DC bin.
    pub fn radial(b: usize, h: usize, w: usize) -> Result<Self> {
        if b == 0 {
            return Err(Error::InvalidConfig("at least one frequency band is required".into()));
        }
        let width = std::f64::consts::SQRT_2 / b as f64;
        let mut masks = vec![vec![0.0; h * w]; b];
        for u in 0..h {
            for v in 0..w {
                let fu = u.min(h - u) as f64 / (h as f64 / 2.0);
                let fv = v.min(w - v) as f64 / (w as f64 / 2.0);
                let r = (fu * fu + fv * fv).sqrt();
                let k = ((r / width) as usize).min(b - 1);
                masks[k][u * w + v] = 1.0;
            }
        }
        Self::from_masks(h, w, masks)
    }

    /// Validate user masks: binary, summing to one in every bin, and
    /// symmetric under `(u, v) → (−u, −v)`.
    pub fn from_masks(h: usize, w: usize, masks: Vec<Vec<f64>>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::InvalidConfig("at least one frequency band is required".into()));
        }
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("band masks need power-of-two sides, got {h}x{w}")));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() != h * w {
                return Err(shape_err(format!("mask {i} has {} bins, expected {}", m.len(), h * w)));
            }
            if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!("mask {i} is not binary")));
            }
            for u in 0..h {
                for v in 0..w {
                    if m[u * w + v] != m[((h - u) % h) * w + (w - v) % w] {
                        return Err(Error::InvalidArgument(format!(
                            "mask {i} is not symmetric at bin ({u}, {v})"
                        )));
                    }
                }
            }
        }
        for bin in 0..h * w {
            let s: f64 = masks.iter().map(|m| m[bin]).sum();
            if s != 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "masks do not partition the plane: bin {bin} is covered {s} times"
                )));
            }
        }
        Ok(BandSpec { h, w, masks: Arc::new(masks) })
    }

    pub fn bands(&self) -> usize {
        self.masks.len()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn masks(&self) -> &[Vec<f64>] {
        &self.masks
    }

    pub(crate) fn shared_masks(&self) -> Arc<Vec<Vec<f64>>> {
        self.masks.clone()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, _, h, w] if (*h, *w) == (self.h, self.w) => Ok(()),
            _ => Err(shape_err(format!(
                "band spec is {}x{}, input is {shape:?}",
                self.h, self.w
            ))),
        }
    }
}

/// Largest imaginary residue tolerated when taking band components real.
pub const IMAG_TOL: f64 = 1e-10;

/// `X_b = F⁻¹(M_b · F(X))` for every band of `spec`, each `[N, C, H, W]`.
pub fn band_decompose(x: &Tensor, spec: &BandSpec) -> Result<Vec<Tensor>> {
    spec.check_input(x.shape())?;
    let f = fft2(x)?;
    let hw = spec.h * spec.w;
    spec.masks
        .iter()
        .map(|m| {
            let mut fb = f.clone();
            for (i, pair) in fb.data_mut().chunks_exact_mut(2).enumerate() {
                pair[0] *= m[i % hw];
                pair[1] *= m[i % hw];
            }
            let (re, imag) = real_part(&ifft2(&fb)?)?;
            if imag > IMAG_TOL {
                return Err(Error::InvalidArgument(format!(
                    "band component has imaginary residue {imag:e}"
                )));
            }
            Ok(re)
        })
        .collect()
}

/// Spatially varying band reweighting `X̂(p) = Σ_b A_b(p) X_b(p)` with
/// `A(p) = softmax_b(W x(p) + bias)`.
///
/// `sel_w` is `[B, C, 1, 1]`, `sel_b` is `[B]`. Returns `X̂` and `A`.
pub fn frequency_select(
    t: &mut Tape,
    x: Var,
    spec: &BandSpec,
    sel_w: Var,
    sel_b: Var,
) -> Result<(Var, Var)> {
    spec.check_input(t.shape(x))?;
    let [n, c, h, w] = t.shape(x)[..] else { unreachable!() };
    let b = spec.bands();
    if t.shape(sel_w) != [b, c, 1, 1] {
        return Err(shape_err(format!("selection weight {:?}, expected [{b}, {c}, 1, 1]", t.shape(sel_w))));
    }
    let logits = t.conv2d(x, sel_w, Some(sel_b), 1, Dilation::Scalar(1.0), 1)?;
    let a = t.softmax(logits, 1)?;
    let bands = t.band_split(x, spec.shared_masks())?;
    let a5 = t.reshape(a, &[n, b, 1, h, w])?;
    let weighted = t.mul(bands, a5)?;
    let s = t.sum_axis(weighted, 1)?;
    Ok((t.reshape(s, &[n, c, h, w])?, a))
}

// ---------------------------------------------------------------------------
// FADC

/// Parameters of one frequency-adaptive block, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FadcVars {
    /// Main kernel `[C, C, K, K]`.
    pub weight: Var,
    /// Dilation predictor `[1, C, 3, 3]`: a depth-wise 3×3 per channel whose
    /// outputs are summed, plus `pred_b` `[1]`.
    pub pred_w: Var,
    pub pred_b: Var,
    /// High-frequency gain head `[1, C, 1, 1]` and `[1]`.
    pub lam_w: Var,
    pub lam_b: Var,
    /// Band-selection head `[B, C, 1, 1]` and `[B]`.
    pub sel_w: Var,
    pub sel_b: Var,
}

/// Intermediate maps of [`fadc_forward`].
#[derive(Clone, Copy, Debug)]
pub struct FadcMaps {
    pub out: Var,
    /// `D̂(p)`, `[N, 1, H, W]`.
    pub dilation: Var,
    /// `λ(p) ∈ (0, 2)`, `[N, 1, H, W]`.
    pub lambda: Var,
}

/// Split a kernel into its per-(O, I) spatial mean and the residual.
pub fn split_kernel(t: &mut Tape, w: Var) -> Result<(Var, Var)> {
    let [o, i, k, k2] = t.shape(w)[..] else {
        return Err(shape_err(format!("kernel must be OIKK, got {:?}", t.shape(w))));
    };
    let flat = t.reshape(w, &[o, i, k * k2])?;
    let mean = t.mean_axis(flat, 2)?;
    let tiled = t.broadcast_to(mean, &[o, i, k * k2])?;
    let low = t.reshape(tiled, &[o, i, k, k2])?;
    let high = t.sub(w, low)?;
    Ok((low, high))
}

/// `Y(p) = Σ_k (w_low + λ(p)·w_high)_k · X(p + Δp_k · D̂(p))` with
/// `D̂ = ReLU(f(X)) · d_base` and `λ = 2·sigmoid(g(X))`.
pub fn fadc_forward(t: &mut Tape, x: Var, p: &FadcVars, d_base: f64) -> Result<FadcMaps> {
    if !(d_base > 0.0 && d_base.is_finite()) {
        return Err(Error::InvalidConfig(format!("base dilation must be positive, got {d_base}")));
    }
    let [_, c, _, _] = t.shape(x)[..] else {
        return Err(shape_err(format!("FADC input must be NCHW, got {:?}", t.shape(x))));
    };
    if t.shape(p.weight)[0] != c {
        return Err(shape_err(format!(
            "FADC kernel {:?} must map {c} channels to {c}",
            t.shape(p.weight)
        )));
    }
    let one = Dilation::Scalar(1.0);
    let f = t.conv2d(x, p.pred_w, Some(p.pred_b), 1, one.clone(), 1)?;
    let f = t.relu(f)?;
    let dilation = t.scale(f, d_base)?;
    let g = t.conv2d(x, p.lam_w, Some(p.lam_b), 1, one, 1)?;
    let g = t.sigmoid(g)?;
    let lambda = t.scale(g, 2.0)?;
    let (low, high) = split_kernel(t, p.weight)?;
    let out = t.modulated_conv(x, low, Some((high, lambda)), dilation)?;
    Ok(FadcMaps { out, dilation, lambda })
}

/// `ReLU(Y_FADC + x + X̂)`: adaptive convolution, identity skip and band
/// selection, all channel-preserving.
pub fn fadc_block(t: &mut Tape, x: Var, p: &FadcVars, spec: &BandSpec, d_base: f64) -> Result<Var> {
    let y = fadc_forward(t, x, p, d_base)?.out;
    let (sel, _) = frequency_select(t, x, spec, p.sel_w, p.sel_b)?;
    let s = t.add(y, x)?;
    let s = t.add(s, sel)?;
    t.relu(s)
}

/// Gate every channel by `sigmoid(conv7×7([mean_c x, max_c x]))`.
/// `w` is `[1, 2, 7, 7]`, `b` is `[1]`.
pub fn spatial_attention(t: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let mean = t.mean_axis(x, 1)?;
    let max = t.max_axis(x, 1)?;
    let pooled = t.concat(&[mean, max], 1)?;
    let g = t.conv2d(pooled, w, Some(b), 1, Dilation::Scalar(1.0), 1)?;
    let gate = t.sigmoid(g)?;
    t.mul(x, gate)
}
