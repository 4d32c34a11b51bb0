//! Global semantic prior: embedding files, a deterministic stub embedder,
//! and cross-attention of the embedding over local forensic features.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::image_io::ImageU8;
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const FEMB_MAGIC: [u8; 4] = *b"FEMB";
pub const FEMB_VERSION: u32 = 1;
pub const DEFAULT_DIM: usize = 768;

/// An id and its embedding. Files store the vector as `f32`, so values
/// read from disk are exactly representable in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.vector.len()], self.vector.clone()).expect("non-empty vector")
    }
}

/// Embedding records in file order with lookup by id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    index: HashMap<String, usize>,
}

impl EmbeddingFile {
    pub fn new(dim: usize) -> Self {
        EmbeddingFile { dim, records: Vec::new(), index: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn insert(&mut self, rec: EmbeddingRecord) -> Result<()> {
        if rec.vector.len() != self.dim {
            return Err(shape_err(format!(
                "embedding {:?} has {} values, file dimension is {}",
                rec.id,
                rec.vector.len(),
                self.dim
            )));
        }
        if rec.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!("embedding {:?} is not finite", rec.id)));
        }
        if self.index.contains_key(&rec.id) {
            return Err(Error::DuplicateId(rec.id));
        }
        self.index.insert(rec.id.clone(), self.records.len());
        self.records.push(rec);
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&FEMB_MAGIC);
        out.extend_from_slice(&FEMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
            out.extend_from_slice(r.id.as_bytes());
            for v in &r.vector {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != FEMB_MAGIC {
            return Err(Error::BadMagic { expected: FEMB_MAGIC, found: magic });
        }
        let version = r.u32("version")?;
        if version != FEMB_VERSION {
            return Err(Error::BadVersion(version));
        }
        let dim = r.u32("dimension")? as usize;
        if dim == 0 {
            return Err(Error::Malformed("embedding dimension is zero".into()));
        }
        let count = r.u64("record count")?;
        let mut file = EmbeddingFile::new(dim);
        for i in 0..count {
            let len = r.u32("id length")? as usize;
            let id = std::str::from_utf8(r.take(len, "id")?)
                .map_err(|_| Error::Malformed(format!("record {i}: id is not UTF-8")))?
                .to_string();
            let raw = r.take(4 * dim, "vector")?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            file.insert(EmbeddingRecord { id, vector })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(file)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    EmbeddingFile::decode(&fs::read(path)?)
}

pub fn write_embedding_file(file: &EmbeddingFile, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, file.encode())?;
    Ok(())
}

/// Content hash of an image, used as the stub record id.
pub fn content_id(img: &ImageU8) -> String {
    let mut h = Sha256::new();
    h.update((img.width() as u64).to_le_bytes());
    h.update((img.height() as u64).to_le_bytes());
    h.update(img.data());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic unit-norm pseudo-embedding keyed on the image bytes.
pub fn stub_embed(img: &ImageU8, dim: usize) -> EmbeddingRecord {
    let id = content_id(img);
    let seed = u64::from_str_radix(&id[..16], 16).expect("hex digest");
    let mut r = rng::substream(seed, &id);
    let raw: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    EmbeddingRecord { id, vector: raw.iter().map(|v| v / norm).collect() }
}

// ---------------------------------------------------------------------------
// Attention

/// Projections for a single global query over local positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams {
    /// `D × d_k`
    pub w_q: Tensor,
    /// `C × d_k`
    pub w_k: Tensor,
    /// `C × d_v`
    pub w_v: Tensor,
}

/// The same projections recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl CrossAttentionParams {
    pub fn init(dim: usize, channels: usize, d_k: usize, d_v: usize, r: &mut rng::Rng) -> Self {
        CrossAttentionParams {
            w_q: rng::he_uniform(r, &[dim, d_k], dim),
            w_k: rng::he_uniform(r, &[channels, d_k], channels),
            w_v: rng::he_uniform(r, &[channels, d_v], channels),
        }
    }

    pub fn constants(&self, t: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_q: t.constant(self.w_q.clone()),
            w_k: t.constant(self.w_k.clone()),
            w_v: t.constant(self.w_v.clone()),
        }
    }

    pub fn params(&self, t: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_q: t.param(self.w_q.clone()),
            w_k: t.param(self.w_k.clone()),
            w_v: t.param(self.w_v.clone()),
        }
    }
}

/// Attention result and the per-head weights `[N, 1, L]`.
#[derive(Clone, Debug)]
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// `softmax(Q Kᵀ / √d_h) V` per head with one query per batch item.
///
/// `phi` is `[N, D]`, `local` is `[N, L, C]`; the result is `[N, d_v]`.
/// `d_k` and `d_v` are split evenly across `heads`.
pub fn cross_attention(
    t: &mut Tape,
    phi: Var,
    local: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Attended> {
    let [n, dim] = t.shape(phi)[..] else {
        return Err(shape_err(format!("phi must be [N, D], got {:?}", t.shape(phi))));
    };
    let [nl, _, c] = t.shape(local)[..] else {
        return Err(shape_err(format!("local features must be [N, L, C], got {:?}", t.shape(local))));
    };
    if nl != n {
        return Err(shape_err(format!("batch {n} for phi but {nl} for local features")));
    }
    let [dq, d_k] = t.shape(p.w_q)[..] else { return Err(shape_err("W_Q must be 2-D")) };
    let [ck, dk2] = t.shape(p.w_k)[..] else { return Err(shape_err("W_K must be 2-D")) };
    let [cv, d_v] = t.shape(p.w_v)[..] else { return Err(shape_err("W_V must be 2-D")) };
    if dq != dim || ck != c || cv != c || dk2 != d_k {
        return Err(shape_err(format!(
            "projections {:?}/{:?}/{:?} do not fit D={dim}, C={c}",
            t.shape(p.w_q),
            t.shape(p.w_k),
            t.shape(p.w_v)
        )));
    }
    if heads == 0 || d_k % heads != 0 || d_v % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "{heads} heads must evenly split d_k={d_k} and d_v={d_v}"
        )));
    }
    let phi3 = t.reshape(phi, &[n, 1, dim])?;
    let wq = t.reshape(p.w_q, &[1, dim, d_k])?;
    let wk = t.reshape(p.w_k, &[1, c, d_k])?;
    let wv = t.reshape(p.w_v, &[1, c, d_v])?;
    let q = t.matmul(phi3, wq)?;
    let k = t.matmul(local, wk)?;
    let v = t.matmul(local, wv)?;
    let (hk, hv) = (d_k / heads, d_v / heads);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (t.slice(q, 2, h * hk, hk)?, t.slice(k, 2, h * hk, hk)?, t.slice(v, 2, h * hv, hv)?)
        };
        let kt = t.transpose(kh)?;
        let s = t.matmul(qh, kt)?;
        let s = t.scale(s, 1.0 / (hk as f64).sqrt())?;
        let a = t.softmax(s, 2)?;
        outs.push(t.matmul(a, vh)?);
        weights.push(a);
    }
    let o = if heads == 1 { outs[0] } else { t.concat(&outs, 2)? };
    let out = t.reshape(o, &[n, d_v])?;
    Ok(Attended { out, weights })
}

/// Broadcast the attention output over every position and concatenate it
/// after the local channels: `[N, C, H, W] → [N, C + d_v, H, W]`.
pub fn fuse(t: &mut Tape, phi: Var, local: Var, p: &AttentionVars, heads: usize) -> Result<Var> {
    let [n, c, h, w] = t.shape(local)[..] else {
        return Err(shape_err(format!("local map must be NCHW, got {:?}", t.shape(local))));
    };
    let flat = t.reshape(local, &[n, c, h * w])?;
    let positions = t.transpose(flat)?;
    let att = cross_attention(t, phi, positions, p, heads)?;
    let d_v = t.shape(att.out)[1];
    let a4 = t.reshape(att.out, &[n, d_v, 1, 1])?;
    let tiled = t.broadcast_to(a4, &[n, d_v, h, w])?;
    t.concat(&[local, tiled], 1)
}
