//! Browser demo over RGBA pixel buffers: NPR residual maps, Fourier band
//! decomposition and post-processing perturbations.
//!
//! Every export takes and returns row-major RGBA bytes (`4·w·h`); alpha is
//! ignored on input and opaque on output.

use freqdetect::features::{npr_extract, NprConfig};
use freqdetect::frequency::{band_decompose, BandSpec};
use freqdetect::image_io::{to_tensor, ImageU8};
use freqdetect::perturb::{PerturbKind, PerturbSpec};
use freqdetect::toy::{toy_image, ToyKind};
use freqdetect::{Error, Result, Tensor};
use wasm_bindgen::prelude::*;

pub fn from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<ImageU8> {
    if rgba.len() != 4 * width * height {
        return Err(Error::InvalidArgument(format!("{} bytes for a {width}x{height} RGBA image", rgba.len())));
    }
    let rgb = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    ImageU8::new(width, height, rgb)
}

pub fn to_rgba(img: &ImageU8) -> Vec<u8> {
    img.data().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn gray_rgba(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// Per-pixel mean `|NPR|` over the nine residual channels (`l = 2`).
pub fn npr_magnitude(img: &ImageU8) -> Result<Vec<f64>> {
    let f = npr_extract(&to_tensor(img), NprConfig::default())?;
    let hw = img.width() * img.height();
    let ch = f.shape()[1];
    Ok((0..hw).map(|i| (0..ch).map(|c| f.data()[c * hw + i].abs()).sum::<f64>() / ch as f64).collect())
}

/// NPR magnitude scaled so the strongest pixel is white; all black when the
/// residual vanishes.
pub fn npr_map_image(img: &ImageU8) -> Result<Vec<u8>> {
    let m = npr_magnitude(img)?;
    let peak = m.iter().cloned().fold(0.0, f64::max);
    let scaled: Vec<f64> = if peak > 0.0 { m.iter().map(|v| v / peak).collect() } else { m };
    Ok(gray_rgba(&scaled))
}

fn luminance(img: &ImageU8) -> Tensor {
    let t = to_tensor(img);
    let hw = img.width() * img.height();
    let d = t.data();
    let y = (0..hw).map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i]).collect();
    Tensor::new(vec![1, 1, img.height(), img.width()], y).expect("one plane")
}

/// Radial band components of the luminance, lowest band first.
pub fn bands(img: &ImageU8, n_bands: usize) -> Result<Vec<Vec<f64>>> {
    let spec = BandSpec::radial(n_bands, img.height(), img.width())?;
    Ok(band_decompose(&luminance(img), &spec)?.into_iter().map(|b| b.data().to_vec()).collect())
}

/// The bands stacked vertically: the lowest as plain luminance, the others
/// as `|X_b|` scaled to their own peak.
pub fn band_stack_image(img: &ImageU8, n_bands: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (i, b) in bands(img, n_bands)?.into_iter().enumerate() {
        let shown: Vec<f64> = if i == 0 {
            b
        } else {
            let peak = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
            b.iter().map(|v| if peak > 0.0 { v.abs() / peak } else { 0.0 }).collect()
        };
        out.extend(gray_rgba(&shown));
    }
    Ok(out)
}

pub fn parse_kind(kind: &str) -> Result<PerturbKind> {
    match kind {
        "jpeg" => Ok(PerturbKind::Jpeg),
        "blur" => Ok(PerturbKind::Blur),
        "noise" => Ok(PerturbKind::Noise),
        other => Err(Error::InvalidArgument(format!("unknown perturbation {other:?}"))),
    }
}

pub fn perturb_image(img: &ImageU8, kind: &str, level: f64, seed: u64) -> Result<ImageU8> {
    PerturbSpec::new(parse_kind(kind)?, level, seed)?.apply(img)
}

pub fn toy(kind: &str, seed: u64, index: usize) -> Result<ImageU8> {
    let kind = match kind {
        "real" => ToyKind::Real,
        "nearest" => ToyKind::Nearest,
        "bilinear" => ToyKind::Bilinear,
        other => return Err(Error::InvalidArgument(format!("unknown toy kind {other:?}"))),
    };
    Ok(toy_image(kind, 64, seed, index))
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// 64×64 synthetic image: `real`, `nearest` or `bilinear`.
#[wasm_bindgen]
pub fn toy_sample(kind: &str, seed: u32, index: u32) -> std::result::Result<Vec<u8>, JsError> {
    toy(kind, u64::from(seed), index as usize).map(|i| to_rgba(&i)).map_err(js)
}

#[wasm_bindgen]
pub fn npr_map(rgba: &[u8], width: usize, height: usize) -> std::result::Result<Vec<u8>, JsError> {
    from_rgba(rgba, width, height).and_then(|i| npr_map_image(&i)).map_err(js)
}

/// Mean NPR magnitude in 0–1 pixel units.
#[wasm_bindgen]
pub fn npr_energy(rgba: &[u8], width: usize, height: usize) -> std::result::Result<f64, JsError> {
    let m = from_rgba(rgba, width, height).and_then(|i| npr_magnitude(&i)).map_err(js)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// `n_bands` RGBA images of the input size, stacked vertically.
#[wasm_bindgen]
pub fn band_stack(rgba: &[u8], width: usize, height: usize, n_bands: usize) -> std::result::Result<Vec<u8>, JsError> {
    from_rgba(rgba, width, height).and_then(|i| band_stack_image(&i, n_bands)).map_err(js)
}

/// Share of the non-DC energy in each band. The mean lives entirely in the
/// lowest band and is left out.
pub fn band_shares(img: &ImageU8, n_bands: usize) -> Result<Vec<f64>> {
    let b = bands(img, n_bands)?;
    let e: Vec<f64> = b
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mean = if i == 0 { x.iter().sum::<f64>() / x.len() as f64 } else { 0.0 };
            x.iter().map(|v| (v - mean) * (v - mean)).sum()
        })
        .collect();
    let total: f64 = e.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    Ok(e.iter().map(|v| v / total).collect())
}

#[wasm_bindgen]
pub fn band_energy(rgba: &[u8], width: usize, height: usize, n_bands: usize) -> std::result::Result<Vec<f64>, JsError> {
    from_rgba(rgba, width, height).and_then(|i| band_shares(&i, n_bands)).map_err(js)
}

/// `kind` is `jpeg` (level = quality), `blur` or `noise` (level = σ).
#[wasm_bindgen]
pub fn perturb(
    rgba: &[u8],
    width: usize,
    height: usize,
    kind: &str,
    level: f64,
    seed: u32,
) -> std::result::Result<Vec<u8>, JsError> {
    from_rgba(rgba, width, height)
        .and_then(|i| perturb_image(&i, kind, level, u64::from(seed)))
        .map(|i| to_rgba(&i))
        .map_err(js)
}
