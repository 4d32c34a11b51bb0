//! 8-bit RGB images, binary PPM files, dataset manifests and conversion to
//! normalized tensors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Smallest side accepted by the block transforms downstream.
pub const MIN_SIDE: usize = 8;

/// Interleaved row-major RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageU8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("degenerate image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(shape_err(format!(
                "{width}x{height} RGB needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(ImageU8 { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        ImageU8 { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Fail unless both sides are at least [`MIN_SIDE`].
    pub fn require_min_side(&self) -> Result<()> {
        if self.width < MIN_SIDE || self.height < MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{}, both sides must be at least {MIN_SIDE}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// PPM

/// Parse a binary (P6) PPM with maxval 255.
pub fn parse_ppm(bytes: &[u8]) -> Result<ImageU8> {
    let magic = bytes.get(..2).ok_or_else(|| Error::Truncated("PPM magic".into()))?;
    if magic != b"P6" {
        return Err(Error::UnsupportedFormat(format!(
            "expected binary PPM magic P6, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = header_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval}, only 255 is supported")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(Error::Malformed("no whitespace after maxval".into())),
        None => return Err(Error::Truncated("PPM header".into())),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Malformed(format!("dimensions {width}x{height} overflow")))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Truncated(format!(
            "raster needs {need} bytes, file has {}",
            payload.len()
        )));
    }
    if payload.len() > need {
        return Err(Error::Malformed(format!("{} trailing bytes after raster", payload.len() - need)));
    }
    ImageU8::new(width, height, payload.to_vec()).map_err(|e| Error::Malformed(e.to_string()))
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // skip whitespace and comments
    loop {
        match bytes.get(*pos) {
            None => return Err(Error::Truncated("PPM header".into())),
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Malformed(format!("expected a number at header byte {start}")));
    }
    if bytes.get(*pos).is_none() {
        return Err(Error::Truncated("PPM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Malformed(format!("bad header number at byte {start}")))
}

pub fn encode_ppm(img: &ImageU8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageU8> {
    parse_ppm(&fs::read(path)?)
}

pub fn save_ppm(img: &ImageU8, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

/// Load by extension: `.ppm` always, `.png` when built with the `png` feature.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageU8> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm") => load_ppm(path),
        #[cfg(feature = "png")]
        Some("png") => {
            let img = image::open(path)
                .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            ImageU8::new(w as usize, h as usize, img.into_raw())
        }
        _ => Err(Error::UnsupportedFormat(format!("{}: unknown image type", path.display()))),
    }
}

// ---------------------------------------------------------------------------
// Tensors

/// `1 × 3 × H × W` tensor with values `v / 255`.
pub fn to_tensor(img: &ImageU8) -> Tensor {
    let (w, h) = (img.width, img.height);
    let hw = w * h;
    let mut data = vec![0.0; 3 * hw];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data).expect("consistent by construction")
}

/// Inverse of [`to_tensor`]: scale by 255, round half away from zero, clamp.
pub fn to_image(t: &Tensor) -> Result<ImageU8> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(shape_err(format!("expected 1x3xHxW, got {:?}", t.shape())));
    }
    let hw = h * w;
    let mut data = vec![0u8; 3 * hw];
    for i in 0..hw {
        for ch in 0..3 {
            data[i * 3 + ch] = quantize(t.data()[ch * hw + i] * 255.0);
        }
    }
    ImageU8::new(w, h, data)
}

/// Clamp to `[0, 255]` and round half away from zero.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.clamp(0.0, 255.0).round() as u8
}

/// Center crop to a square, then nearest-neighbour resize to `size × size`.
pub fn center_crop_resize(img: &ImageU8, size: usize) -> Result<ImageU8> {
    img.require_min_side()?;
    if size < MIN_SIDE {
        return Err(Error::InvalidArgument(format!("target size {size} below {MIN_SIDE}")));
    }
    let s = img.width.min(img.height);
    let top = (img.height - s) / 2;
    let left = (img.width - s) / 2;
    // sample the source pixel whose footprint contains the target centre
    let src = |i: usize| (2 * i + 1) * s / (2 * size);
    Ok(ImageU8::from_fn(size, size, |x, y| img.pixel(left + src(x), top + src(y))))
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u8,
    pub split: Split,
}

/// Labelled image list; relative paths resolve against `base_dir`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Malformed(format!(
                "{}: header must be path,label,split",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        for row in rdr.deserialize() {
            let e: ManifestEntry = row?;
            if e.label > 1 {
                return Err(Error::Malformed(format!("label {} for {}", e.label, e.path)));
            }
            entries.push(e);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { entries, base_dir })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&e.path)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Fail unless `split` holds at least one sample of each class.
    pub fn require_both_classes(&self, split: Split) -> Result<()> {
        let rows = self.split(split);
        for label in [0, 1] {
            if !rows.iter().any(|e| e.label == label) {
                return Err(Error::Empty(format!("{split:?} split has no samples of class {label}")));
            }
        }
        Ok(())
    }
}
