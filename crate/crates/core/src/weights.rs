//! Named tensor store and the FWTS container format.
//!
//! Layout (little-endian): magic `FWTS`, u32 version, u32 tensor count, then
//! per tensor a u32 name length, the UTF-8 name, u32 rank, u32 dims and the
//! payload as f64.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::semantic::Reader;
use crate::tensor::Tensor;

pub const FWTS_MAGIC: [u8; 4] = *b"FWTS";
pub const FWTS_VERSION: u32 = 1;

/// Insertion-ordered map from unique names to tensors. Entries are either
/// trainable parameters or buffers (running statistics, thresholds).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateId(name.to_string()));
        }
        let i = self.names.len();
        self.index.insert(name.to_string(), i);
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.trainable.push(trainable);
        Ok(i)
    }

    pub fn add_param(&mut self, name: &str, t: Tensor) -> Result<usize> {
        self.push(name, t, true)
    }

    pub fn add_buffer(&mut self, name: &str, t: Tensor) -> Result<usize> {
        self.push(name, t, false)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().zip(&self.trainable).filter(|(_, &t)| t).map(|(x, _)| x.numel()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&FWTS_MAGIC);
        out.extend_from_slice(&FWTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decode a file into `(name, tensor)` pairs in file order.
    pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != FWTS_MAGIC {
            return Err(Error::BadMagic { expected: FWTS_MAGIC, found: magic });
        }
        let version = r.u32("version")?;
        if version != FWTS_VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut seen = HashMap::new();
        let mut out = Vec::with_capacity(count as usize);
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Malformed(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Malformed(format!("{name}: shape {shape:?} overflows")))?;
            let raw = r.take(numel, "payload")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Malformed(format!("{name}: {e}")))?;
            if seen.insert(name.clone(), ()).is_some() {
                return Err(Error::DuplicateId(name));
            }
            out.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(out)
    }

    /// Replace every tensor from `entries`, which must match this store's
    /// names and shapes exactly (order may differ).
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut fresh = self.tensors.clone();
        let mut filled = vec![false; self.len()];
        for (name, t) in entries {
            let i = self.index_of(&name).ok_or_else(|| Error::ParamMismatch {
                name: name.clone(),
                reason: "not a parameter of this model".into(),
            })?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::ParamMismatch {
                    name,
                    reason: format!("file shape {:?}, model shape {:?}", t.shape(), self.tensors[i].shape()),
                });
            }
            fresh[i] = t;
            filled[i] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::ParamMismatch {
                name: self.names[i].clone(),
                reason: "missing from file".into(),
            });
        }
        self.tensors = fresh;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load_into(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let entries = Self::decode(&fs::read(path)?)?;
        self.load_entries(entries)
    }
}
