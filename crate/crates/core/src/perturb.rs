//! Deterministic post-processing: JPEG-style quantization, Gaussian blur and
//! Gaussian noise, plus robustness sweeps over a test split.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image_io::{load_image, quantize, ImageU8, Manifest, Split};
use crate::metrics::{average_precision, Confusion};
use crate::model::Detector;
use crate::rng;
use crate::semantic::EmbeddingFile;
use crate::train::{prepare_image, score, Sample};

const LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51,
    87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99,
];

/// Standard table scaled by the IJG quality rule.
pub fn quant_table(base: &[u16; 64], q: u32) -> Result<[u16; 64]> {
    if !(1..=100).contains(&q) {
        return Err(Error::InvalidArgument(format!("JPEG quality {q} outside [1, 100]")));
    }
    let s = if q < 50 { 5000 / q } else { 200 - 2 * q };
    Ok(base.map(|t| ((u32::from(t) * s + 50) / 100).clamp(1, 255) as u16))
}

pub fn luma_table(q: u32) -> Result<[u16; 64]> {
    quant_table(&LUMA, q)
}

pub fn chroma_table(q: u32) -> Result<[u16; 64]> {
    quant_table(&CHROMA, q)
}

/// `basis[u][x] = C(u)/2 · cos((2x+1)uπ/16)`, the orthonormal 1-D factor.
fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let c = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * c * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    })
}

/// Orthonormal 8×8 DCT-II of a row-major block, computed separably.
pub fn dct8(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Inverse of [`dct8`].
pub fn idct8(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| b[v][y] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| b[u][x] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Mirror index without repeating the edge, for any offset.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Compress and decompress through quantized block DCTs in YCbCr (full-range
/// BT.601, no chroma subsampling). Sides are reflect-padded to multiples of 8
/// and cropped back.
pub fn jpeg_like(img: &ImageU8, q: u32) -> Result<ImageU8> {
    let tables = [luma_table(q)?, chroma_table(q)?, chroma_table(q)?];
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w.div_ceil(8) * 8, h.div_ceil(8) * 8);
    let mut planes = vec![vec![0.0; pw * ph]; 3];
    for y in 0..ph {
        for x in 0..pw {
            let [r, g, b] = img.pixel(reflect(x as isize, w), reflect(y as isize, h)).map(f64::from);
            let i = y * pw + x;
            planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
            planes[1][i] = -0.168736 * r - 0.331264 * g + 0.5 * b;
            planes[2][i] = 0.5 * r - 0.418688 * g - 0.081312 * b;
        }
    }
    for (plane, table) in planes.iter_mut().zip(&tables) {
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [0.0; 64];
                for k in 0..64 {
                    block[k] = plane[(by + k / 8) * pw + bx + k % 8];
                }
                let mut coef = dct8(&block);
                for (c, &t) in coef.iter_mut().zip(table) {
                    let t = f64::from(t);
                    *c = (*c / t).round() * t;
                }
                let back = idct8(&coef);
                for k in 0..64 {
                    plane[(by + k / 8) * pw + bx + k % 8] = back[k];
                }
            }
        }
    }
    Ok(ImageU8::from_fn(w, h, |x, y| {
        let i = y * pw + x;
        let (yy, cb, cr) = (planes[0][i] + 128.0, planes[1][i], planes[2][i]);
        [yy + 1.402 * cr, yy - 0.344136 * cb - 0.714136 * cr, yy + 1.772 * cb].map(quantize)
    }))
}

/// Normalized 1-D Gaussian taps over `[-ceil(3σ), ceil(3σ)]`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be a nonnegative number")));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian blur with reflect padding; accumulation stays in
/// floating point and rounds once at the end.
pub fn gaussian_blur(img: &ImageU8, sigma: f64) -> Result<ImageU8> {
    let k = gaussian_kernel(sigma)?;
    if k.len() == 1 {
        return Ok(img.clone());
    }
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let src = img.data();
    let mut horiz = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                horiz[(y * w + x) * 3 + c] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * f64::from(src[(y * w + reflect(x as isize + j as isize - r, w)) * 3 + c]))
                    .sum();
            }
        }
    }
    Ok(ImageU8::from_fn(w, h, |x, y| {
        std::array::from_fn(|c| {
            quantize(
                k.iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * horiz[(reflect(y as isize + j as isize - r, h) * w + x) * 3 + c])
                    .sum(),
            )
        })
    }))
}

/// Add `N(0, σ²)` in 0–255 units to every channel, then clamp and round.
pub fn gaussian_noise(img: &ImageU8, sigma: f64, seed: u64) -> Result<ImageU8> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be a nonnegative number")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut r = rng::substream(seed, "perturb.noise");
    let data = img.data().iter().map(|&v| quantize(f64::from(v) + sigma * rng::normal(&mut r))).collect();
    ImageU8::new(img.width(), img.height(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PerturbKind {
    Jpeg,
    Blur,
    Noise,
}

impl PerturbKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Jpeg => "jpeg",
            PerturbKind::Blur => "blur",
            PerturbKind::Noise => "noise",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    /// JPEG quality in `[1, 100]`, or σ for blur and noise.
    pub level: f64,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, level: f64, seed: u64) -> Result<Self> {
        let ok = match kind {
            PerturbKind::Jpeg => level.fract() == 0.0 && (1.0..=100.0).contains(&level),
            PerturbKind::Blur | PerturbKind::Noise => level >= 0.0 && level.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("level {level} is invalid for {}", kind.name())));
        }
        Ok(PerturbSpec { kind, level, seed })
    }

    pub fn apply(&self, img: &ImageU8) -> Result<ImageU8> {
        match self.kind {
            PerturbKind::Jpeg => jpeg_like(img, self.level as u32),
            PerturbKind::Blur => gaussian_blur(img, self.level),
            PerturbKind::Noise => gaussian_noise(img, self.level, self.seed),
        }
    }

    /// Parse `kind:level[,kind:level...]`.
    pub fn parse_list(s: &str, seed: u64) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse::<PerturbSpec>().map(|spec| PerturbSpec { seed, ..spec }))
            .collect()
    }

    /// Default ladders: JPEG q ∈ {95, 80, 65, 50}, blur and noise σ ∈ {0, 1, 2, 3}.
    pub fn default_ladder(seed: u64) -> Vec<Self> {
        let mut out = Vec::new();
        for q in [50.0, 65.0, 80.0, 95.0] {
            out.push(PerturbSpec { kind: PerturbKind::Jpeg, level: q, seed });
        }
        for kind in [PerturbKind::Blur, PerturbKind::Noise] {
            for s in 0..4 {
                out.push(PerturbSpec { kind, level: f64::from(s), seed });
            }
        }
        out
    }
}

impl FromStr for PerturbSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, level) =
            s.split_once(':').ok_or_else(|| Error::InvalidArgument(format!("expected kind:level, got {s:?}")))?;
        let kind = match kind {
            "jpeg" => PerturbKind::Jpeg,
            "blur" => PerturbKind::Blur,
            "noise" => PerturbKind::Noise,
            other => return Err(Error::InvalidArgument(format!("unknown perturbation {other:?}"))),
        };
        let level: f64 = level.parse().map_err(|_| Error::InvalidArgument(format!("bad level in {s:?}")))?;
        PerturbSpec::new(kind, level, 0)
    }
}

impl fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.level)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub kind: PerturbKind,
    pub level: f64,
    pub acc: f64,
    pub ap: f64,
}

/// Rows ordered by kind of first appearance, then ascending level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn get(&self, kind: PerturbKind, level: f64) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.kind == kind && r.level == level)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["kind", "level", "acc", "ap"])?;
        for r in &self.rows {
            w.write_record([r.kind.name().to_string(), r.level.to_string(), r.acc.to_string(), r.ap.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Perturb every image, score it and report ACC at the detector's threshold
/// together with AP. `images` pairs each image with its id and label.
pub fn sweep_images(
    det: &Detector,
    images: &[(String, u8, ImageU8)],
    specs: &[PerturbSpec],
    embeddings: Option<&EmbeddingFile>,
    batch_size: usize,
) -> Result<RobustnessReport> {
    if images.is_empty() {
        return Err(Error::Empty("test split is empty".into()));
    }
    let mut ordered: Vec<PerturbSpec> = specs.to_vec();
    let mut kinds: Vec<PerturbKind> = Vec::new();
    for s in specs {
        if !kinds.contains(&s.kind) {
            kinds.push(s.kind);
        }
    }
    ordered.sort_by(|a, b| {
        let ka = kinds.iter().position(|&k| k == a.kind);
        let kb = kinds.iter().position(|&k| k == b.kind);
        ka.cmp(&kb).then(a.level.total_cmp(&b.level))
    });
    let labels: Vec<u8> = images.iter().map(|(_, l, _)| *l).collect();
    let mut rows = Vec::with_capacity(ordered.len());
    for spec in ordered {
        let samples = images
            .iter()
            .map(|(id, label, img)| prepare_image(det, &spec.apply(img)?, id, *label, embeddings))
            .collect::<Result<Vec<Sample>>>()?;
        let scores = score(det, &samples, batch_size)?;
        rows.push(RobustnessRow {
            kind: spec.kind,
            level: spec.level,
            acc: Confusion::at(&scores, &labels, det.threshold()).accuracy(),
            ap: average_precision(&scores, &labels)?,
        });
    }
    Ok(RobustnessReport { rows })
}

/// [`sweep_images`] over the manifest's test split.
pub fn robustness_sweep(
    det: &Detector,
    manifest: &Manifest,
    specs: &[PerturbSpec],
    embeddings: Option<&EmbeddingFile>,
    batch_size: usize,
) -> Result<RobustnessReport> {
    let images = manifest
        .split(Split::Test)
        .into_iter()
        .map(|e| Ok((e.path.clone(), e.label, load_image(manifest.resolve(e))?)))
        .collect::<Result<Vec<_>>>()?;
    sweep_images(det, &images, specs, embeddings, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ijg_scaling() {
        assert_eq!(luma_table(50).unwrap(), LUMA);
        assert!(luma_table(100).unwrap().iter().all(|&t| t == 1));
        assert_eq!(luma_table(10).unwrap()[0], 80);
        assert!(luma_table(0).is_err() && luma_table(101).is_err());
    }

    #[test]
    fn dct_round_trip() {
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 37) % 23) as f64 - 11.0);
        let back = idct8(&dct8(&block));
        assert!(block.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn reflect_wraps() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-7, 4), 1);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn spec_parsing() {
        let s = PerturbSpec::parse_list("jpeg:80, blur:1.5,noise:2", 9).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].level, 1.5);
        assert_eq!(s[2].seed, 9);
        assert!("jpeg:0".parse::<PerturbSpec>().is_err());
        assert!("jpeg:80.5".parse::<PerturbSpec>().is_err());
        assert!("blur:-1".parse::<PerturbSpec>().is_err());
        assert!("crop:2".parse::<PerturbSpec>().is_err());
    }

    #[test]
    fn noise_zero_sigma_and_negative() {
        let img = ImageU8::from_fn(8, 8, |x, y| [x as u8, y as u8, 7]);
        assert_eq!(gaussian_noise(&img, 0.0, 1).unwrap(), img);
        assert!(gaussian_noise(&img, -1.0, 1).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }
}
