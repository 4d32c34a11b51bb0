//! Spatial forensic branches: neighbouring-pixel differences and image
//! gradients.

use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::{Dilation, Tape, Tensor, Var};

/// Grid side for neighbouring-pixel differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NprConfig {
    pub l: usize,
}

impl Default for NprConfig {
    fn default() -> Self {
        NprConfig { l: 2 }
    }
}

impl NprConfig {
    pub fn channels(&self, colors: usize) -> usize {
        colors * (self.l * self.l - 1)
    }
}

/// Differences of every pixel in each `l × l` grid against the grid's
/// top-left pixel, tiled back to full resolution.
///
/// Input `[N, C, H, W]`, output `[N, C·(l²−1), H, W]`. For color `c`,
/// channel `c·(l²−1) + i − 1` holds `w_i − w_0` where `i` walks the grid in
/// row-major order.
pub fn npr_extract(img: &Tensor, cfg: NprConfig) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    let l = cfg.l;
    if l < 2 {
        return Err(Error::InvalidArgument(format!("NPR grid side must be at least 2, got {l}")));
    }
    if h % l != 0 || w % l != 0 {
        return Err(shape_err(format!("{h}x{w} is not divisible by grid side {l}")));
    }
    let per = l * l - 1;
    let hw = h * w;
    let mut out = vec![0.0; n * c * per * hw];
    let src = img.data();
    for b in 0..n {
        for ch in 0..c {
            let plane = &src[(b * c + ch) * hw..][..hw];
            for gy in (0..h).step_by(l) {
                for gx in (0..w).step_by(l) {
                    let reference = plane[gy * w + gx];
                    for i in 1..l * l {
                        let d = plane[(gy + i / l) * w + gx + i % l] - reference;
                        let dst = &mut out[((b * c + ch) * per + i - 1) * hw..][..hw];
                        for y in gy..gy + l {
                            dst[y * w + gx..y * w + gx + l].fill(d);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c * per, h, w], out)
}

/// A differentiable network `M` whose summed output defines the gradient
/// feature `∂ Σ_k M_k(I) / ∂I`.
pub trait Backbone {
    /// Record the forward pass on `tape`; parameters enter as constants.
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

/// Frozen seeded CNN: three 3×3 convolutions `3 → 8 → 16 → 16`, each
/// followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedBackbone {
    layers: Vec<(Tensor, Tensor)>,
}

impl FixedBackbone {
    pub const WIDTHS: [usize; 4] = [3, 8, 16, 16];

    pub fn new(seed: u64) -> Self {
        let mut r = rng::substream(seed, "backbone");
        let layers = Self::WIDTHS
            .windows(2)
            .map(|io| {
                let w = rng::he_uniform(&mut r, &[io[1], io[0], 3, 3], io[0] * 9);
                let b = rng::he_uniform(&mut r, &[io[1]], io[0] * 9).map(|v| 0.1 * v);
                (w, b)
            })
            .collect();
        FixedBackbone { layers }
    }

    pub fn out_channels(&self) -> usize {
        Self::WIDTHS[3]
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }
}

impl Backbone for FixedBackbone {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (w, b) in &self.layers {
            let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
            h = tape.conv2d(h, w, Some(b), 1, Dilation::Scalar(1.0), 1)?;
            h = tape.relu(h)?;
        }
        Ok(h)
    }
}

/// Input gradient of the backbone's summed response. With `guided`, ReLU
/// adjoints additionally drop negative incoming gradients.
pub fn gradient_extract(img: &Tensor, backbone: &dyn Backbone, guided: bool) -> Result<Tensor> {
    img.dims4()?;
    let mut tape = Tape::new().with_guided_relu(guided);
    let x = tape.param(img.clone());
    let m = backbone.forward(&mut tape, x)?;
    let s = tape.sum(m)?;
    let mut grads = tape.backward(s)?;
    Ok(grads.take(x).expect("input is a parameter"))
}

/// Horizontal then vertical Sobel responses (kernel `[[-1,0,1],[-2,0,2],[-1,0,1]]`
/// and its transpose, applied as correlations) per color with reflect padding:
/// `[N, C, H, W] → [N, 2C, H, W]`, channels `[Gx_0..Gx_C, Gy_0..Gy_C]`.
pub fn sobel_gradient(img: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = img.dims4()?;
    if h < 2 || w < 2 {
        return Err(shape_err(format!("reflect padding needs at least 2x2, got {h}x{w}")));
    }
    let reflect = |i: isize, len: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i >= len as isize {
            2 * (len - 1) - i as usize
        } else {
            i as usize
        }
    };
    let hw = h * w;
    let mut out = vec![0.0; n * 2 * c * hw];
    for b in 0..n {
        for ch in 0..c {
            let plane = &img.data()[(b * c + ch) * hw..][..hw];
            for y in 0..h {
                for x in 0..w {
                    let a = |dy: isize, dx: isize| {
                        plane[reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w)]
                    };
                    // paired differences keep flat regions exactly zero
                    let gx = (a(-1, 1) - a(-1, -1)) + 2.0 * (a(0, 1) - a(0, -1)) + (a(1, 1) - a(1, -1));
                    let gy = (a(1, -1) - a(-1, -1)) + 2.0 * (a(1, 0) - a(-1, 0)) + (a(1, 1) - a(-1, 1));
                    out[((b * 2 * c) + ch) * hw + y * w + x] = gx;
                    out[((b * 2 * c) + c + ch) * hw + y * w + x] = gy;
                }
            }
        }
    }
    Tensor::new(vec![n, 2 * c, h, w], out)
}
