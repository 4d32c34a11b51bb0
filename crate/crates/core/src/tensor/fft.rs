//! Radix-2 fast Fourier transforms over the two trailing axes.
//!
//! Complex tensors are stored as real tensors with a trailing axis of
//! length 2 holding `(re, im)`. The forward transform is unnormalized and
//! the inverse carries the `1/(H·W)` factor.

use num_complex::Complex64;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Precomputed twiddles and bit-reversal permutation for one length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if !n.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "FFT length {n} is not a power of two; pad with pad_to_pow2 first"
            )));
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k as f64 / n as f64))
            .collect();
        Ok(FftPlan { n, twiddles, bitrev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place transform. `inverse` conjugates the twiddles; no scaling.
    pub fn process(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * step];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

impl FftPlan {
    /// Transform along the outer axis of a row-major `len × inner` block held
    /// as split real and imaginary parts. Each butterfly updates whole rows,
    /// so the inner loop runs over `inner` contiguous values. No scaling.
    pub(crate) fn process_rows(&self, re: &mut [f64], im: &mut [f64], inner: usize, inverse: bool) {
        let n = self.n;
        debug_assert!(re.len() == n * inner && im.len() == n * inner);
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                for buf in [&mut *re, &mut *im] {
                    let (a, b) = buf.split_at_mut(j * inner);
                    a[i * inner..(i + 1) * inner].swap_with_slice(&mut b[..inner]);
                }
            }
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let tw = self.twiddles[k * step];
                    let (wr, wi) = (tw.re, sign * tw.im);
                    let (lo, hi) = ((start + k) * inner, (start + k + half) * inner);
                    let (ra, rb) = re.split_at_mut(hi);
                    let (ia, ib) = im.split_at_mut(hi);
                    let (ar, br) = (&mut ra[lo..lo + inner], &mut rb[..inner]);
                    let (ai, bi) = (&mut ia[lo..lo + inner], &mut ib[..inner]);
                    for x in 0..inner {
                        let tr = br[x] * wr - bi[x] * wi;
                        let ti = br[x] * wi + bi[x] * wr;
                        br[x] = ar[x] - tr;
                        bi[x] = ai[x] - ti;
                        ar[x] += tr;
                        ai[x] += ti;
                    }
                }
            }
            len <<= 1;
        }
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Plans for an `h × w` plane.
#[derive(Debug, Clone)]
pub struct Fft2Plan {
    rows: FftPlan,
    cols: FftPlan,
}

impl Fft2Plan {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        Ok(Fft2Plan { rows: FftPlan::new(w)?, cols: FftPlan::new(h)? })
    }

    pub fn height(&self) -> usize {
        self.cols.len()
    }

    pub fn width(&self) -> usize {
        self.rows.len()
    }

    /// Transform one row-major plane held as split parts, in place. The
    /// inverse includes `1/(h·w)`.
    pub(crate) fn process_split(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let (h, w) = (self.height(), self.width());
        self.cols.process_rows(re, im, w, inverse);
        let mut tr = vec![0.0; h * w];
        let mut ti = vec![0.0; h * w];
        transpose(re, h, w, &mut tr);
        transpose(im, h, w, &mut ti);
        self.rows.process_rows(&mut tr, &mut ti, h, inverse);
        transpose(&tr, w, h, re);
        transpose(&ti, w, h, im);
        if inverse {
            let s = 1.0 / (h * w) as f64;
            re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= s);
        }
    }

    /// Transform one row-major plane in place. The inverse includes `1/(h·w)`.
    pub fn process(&self, plane: &mut [Complex64], inverse: bool) {
        let mut re: Vec<f64> = plane.iter().map(|c| c.re).collect();
        let mut im: Vec<f64> = plane.iter().map(|c| c.im).collect();
        self.process_split(&mut re, &mut im, inverse);
        for ((c, r), i) in plane.iter_mut().zip(re).zip(im) {
            *c = Complex64::new(r, i);
        }
    }
}

fn complex_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 3 || s[s.len() - 1] != 2 {
        return Err(shape_err(format!("expected a complex tensor [..., H, W, 2], got {s:?}")));
    }
    let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
    Ok((x.numel() / (2 * h * w), h, w))
}

/// Transform every `H × W` plane of a complex tensor `[..., H, W, 2]`.
pub fn fft2_complex(x: &Tensor, inverse: bool) -> Result<Tensor> {
    let (planes, h, w) = complex_dims(x)?;
    let plan = Fft2Plan::new(h, w)?;
    let mut out = Vec::with_capacity(x.numel());
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for p in 0..planes {
        let src = &x.data()[p * 2 * h * w..(p + 1) * 2 * h * w];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex64::new(src[2 * i], src[2 * i + 1]);
        }
        plan.process(&mut buf, inverse);
        for c in &buf {
            out.push(c.re);
            out.push(c.im);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Lift a real tensor `[..., H, W]` to complex `[..., H, W, 2]`.
pub fn to_complex(x: &Tensor) -> Tensor {
    let mut shape = x.shape().to_vec();
    shape.push(2);
    let mut data = Vec::with_capacity(2 * x.numel());
    for &v in x.data() {
        data.push(v);
        data.push(0.0);
    }
    Tensor { shape, data }
}

/// Real part of a complex tensor, and the largest |imag| discarded.
pub fn real_part(x: &Tensor) -> Result<(Tensor, f64)> {
    complex_dims(x)?;
    let shape = x.shape()[..x.ndim() - 1].to_vec();
    let mut max_imag: f64 = 0.0;
    let data = x
        .data()
        .chunks_exact(2)
        .map(|c| {
            max_imag = max_imag.max(c[1].abs());
            c[0]
        })
        .collect();
    Ok((Tensor { shape, data }, max_imag))
}

/// Forward 2-D DFT of a real tensor over its two trailing axes.
pub fn fft2(x: &Tensor) -> Result<Tensor> {
    if x.ndim() < 2 {
        return Err(shape_err(format!("fft2 needs at least 2 axes, got {:?}", x.shape())));
    }
    fft2_complex(&to_complex(x), false)
}

/// Inverse 2-D DFT of a complex tensor `[..., H, W, 2]`.
pub fn ifft2(x: &Tensor) -> Result<Tensor> {
    fft2_complex(x, true)
}

/// Zero-pad the two trailing axes up to the next powers of two.
pub fn pad_to_pow2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(shape_err(format!("pad_to_pow2 needs at least 2 axes, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (ph, pw) = (h.next_power_of_two(), w.next_power_of_two());
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let planes = x.numel() / (h * w);
    let mut data = vec![0.0; planes * ph * pw];
    for p in 0..planes {
        for y in 0..h {
            let src = &x.data()[(p * h + y) * w..(p * h + y + 1) * w];
            data[(p * ph + y) * pw..(p * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = ph;
    shape[n - 1] = pw;
    Tensor::new(shape, data)
}
