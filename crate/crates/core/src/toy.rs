//! Synthetic real/fake corpus for desk-scale experiments.
//!
//! Real images are seeded noise smoothed at full resolution. Fakes are the
//! same kind of texture drawn at half resolution and upsampled 2×, either by
//! pixel replication (the training fake type) or bilinearly (held out).

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::image_io::{quantize, save_ppm, ImageU8, Manifest, ManifestEntry, Split};
use crate::perturb::gaussian_kernel;
use crate::rng::{self, Rng};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ToyKind {
    Real,
    /// Nearest-neighbour 2× upsampling.
    Nearest,
    /// Bilinear 2× upsampling.
    Bilinear,
}

impl ToyKind {
    pub fn label(self) -> u8 {
        match self {
            ToyKind::Real => 0,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToyKind::Real => "real",
            ToyKind::Nearest => "nearest",
            ToyKind::Bilinear => "bilinear",
        }
    }
}

/// Smoothed color noise, `size × size`, stored as three float planes.
fn texture(r: &mut Rng, size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let k = gaussian_kernel(sigma).expect("positive sigma");
    let rad = (k.len() / 2) as isize;
    let base: [f64; 3] = std::array::from_fn(|_| r.gen_range(60.0..190.0));
    let amp = r.gen_range(20.0..60.0);
    let wrap = |i: isize| i.rem_euclid(size as isize) as usize;
    (0..3)
        .map(|c| {
            let noise: Vec<f64> = (0..size * size).map(|_| rng::normal(r)).collect();
            let mut h = vec![0.0; size * size];
            for y in 0..size {
                for x in 0..size {
                    h[y * size + x] =
                        k.iter().enumerate().map(|(j, kv)| kv * noise[y * size + wrap(x as isize + j as isize - rad)]).sum();
                }
            }
            let mut v = vec![0.0; size * size];
            for y in 0..size {
                for x in 0..size {
                    v[y * size + x] =
                        k.iter().enumerate().map(|(j, kv)| kv * h[wrap(y as isize + j as isize - rad) * size + x]).sum();
                }
            }
            // renormalise so the smoothing width does not change contrast
            let sd = (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt().max(1e-12);
            v.iter().map(|a| base[c] + amp * a / sd).collect()
        })
        .collect()
}

fn to_image(planes: &[Vec<f64>], size: usize) -> ImageU8 {
    ImageU8::from_fn(size, size, |x, y| std::array::from_fn(|c| quantize(planes[c][y * size + x])))
}

/// One `size × size` image of `kind` drawn from `(seed, index)`.
pub fn toy_image(kind: ToyKind, size: usize, seed: u64, index: usize) -> ImageU8 {
    let mut r = rng::substream(seed, &format!("toy.{}.{index}", kind.name()));
    let sigma = r.gen_range(3.0..6.0);
    match kind {
        ToyKind::Real => {
            let mut planes = texture(&mut r, size, sigma);
            let grain = r.gen_range(2.0..6.0);
            for v in planes.iter_mut().flatten() {
                *v += grain * rng::normal(&mut r);
            }
            to_image(&planes, size)
        }
        ToyKind::Nearest | ToyKind::Bilinear => {
            let half = size / 2;
            let small = to_image(&texture(&mut r, half, sigma), half);
            if kind == ToyKind::Nearest {
                upsample_nearest(&small)
            } else {
                upsample_bilinear(&small)
            }
        }
    }
}

/// Pixel replication: every source pixel becomes a 2×2 block.
pub fn upsample_nearest(img: &ImageU8) -> ImageU8 {
    ImageU8::from_fn(img.width() * 2, img.height() * 2, |x, y| img.pixel(x / 2, y / 2))
}

/// Half-pixel-centred bilinear 2× upsampling with edge clamping.
pub fn upsample_bilinear(img: &ImageU8) -> ImageU8 {
    let (w, h) = (img.width(), img.height());
    let coord = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    ImageU8::from_fn(w * 2, h * 2, |x, y| {
        let (x0, x1, fx) = coord(x, w);
        let (y0, y1, fy) = coord(y, h);
        std::array::from_fn(|c| {
            let p = |xx: usize, yy: usize| f64::from(img.pixel(xx, yy)[c]);
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            quantize(top * (1.0 - fy) + bot * fy)
        })
    })
}

/// Per-split image counts for each kind.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLayout {
    pub size: usize,
    pub seed: u64,
    pub splits: Vec<(Split, ToyKind, usize)>,
}

impl ToyLayout {
    /// Balanced train/val sets of real and nearest fakes; the test split also
    /// holds the bilinear type.
    pub fn standard(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Self {
        let mut splits = Vec::new();
        for (split, n) in [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)] {
            splits.push((split, ToyKind::Real, n / 2));
            splits.push((split, ToyKind::Nearest, n / 2));
        }
        splits.push((Split::Test, ToyKind::Bilinear, n_test / 2));
        ToyLayout { size: 64, seed, splits }
    }
}

/// A generated image with its manifest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyItem {
    pub entry: ManifestEntry,
    pub kind: ToyKind,
    pub image: ImageU8,
}

/// Generate every image of `layout` in memory. Indices never repeat across
/// splits, so no image appears twice.
pub fn generate(layout: &ToyLayout) -> Vec<ToyItem> {
    let mut next = std::collections::HashMap::new();
    let mut out = Vec::new();
    for &(split, kind, n) in &layout.splits {
        for _ in 0..n {
            let i = next.entry(kind).or_insert(0usize);
            let image = toy_image(kind, layout.size, layout.seed, *i);
            let path = format!("{}/{}_{:04}.ppm", split.name(), kind.name(), *i);
            *i += 1;
            out.push(ToyItem { entry: ManifestEntry { path, label: kind.label(), split }, kind, image });
        }
    }
    out
}

/// Write the images as PPM files under `dir` plus `dir/manifest.csv`.
pub fn write_dataset(dir: impl AsRef<Path>, layout: &ToyLayout) -> Result<Manifest> {
    let dir = dir.as_ref();
    let items = generate(layout);
    for item in &items {
        let p = dir.join(&item.entry.path);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        save_ppm(&item.image, p)?;
    }
    let manifest = Manifest { entries: items.into_iter().map(|i| i.entry).collect(), base_dir: dir.to_path_buf() };
    manifest.save(dir.join("manifest.csv"))?;
    Ok(manifest)
}
