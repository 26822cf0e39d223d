//! Named parameter storage and checkpoint persistence.
//!
//! Parameters are addressed by stable dotted paths (`blocks.3.attn.qkv.weight`)
//! and kept in insertion order. Checkpoints are a simple binary format:
//! magic `DIT3D`, a version byte, an entry count, then per entry the name,
//! rank, dimensions, and raw little-endian 32-bit floats. A JSON sidecar
//! written by the training loop carries run metadata; this file holds only
//! tensors.

use crate::error::{Error, Result};
use crate::tensor::Real;
use indexmap::IndexMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"DIT3D";
const VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct ParamTensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub trainable: bool,
}

/// Ordered map of named tensors with a trainable/frozen partition.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: IndexMap<String, ParamTensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<F>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dim(format!(
                "parameter '{name}' has {} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        self.entries.insert(
            name.to_string(),
            ParamTensor {
                shape,
                data,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<F>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor<F>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total scalar entries, optionally restricted to the trainable set.
    pub fn count_scalars(&self, trainable_only: bool) -> u64 {
        self.entries
            .values()
            .filter(|t| !trainable_only || t.trainable)
            .map(|t| t.data.len() as u64)
            .sum()
    }

    /// Applies a predicate over names to set the trainable partition.
    pub fn set_trainable_by(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.entries.iter_mut() {
            t.trainable = pred(name);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, t)| t.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Writes the store to `path` in checkpoint format. Values are stored as
/// 32-bit floats regardless of the working precision.
pub fn save_checkpoint<F: Real>(store: &ParamStore<F>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Contract("too many parameters for checkpoint format".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Contract(format!("parameter name '{name}' too long")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let rank = u8::try_from(tensor.shape.len())
            .map_err(|_| Error::Contract(format!("parameter '{name}' rank too large")))?;
        buf.push(rank);
        for &d in &tensor.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Contract(format!("parameter '{name}' dim too large")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &tensor.data {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint back into a store. Truncated or malformed files fail
/// without returning a partial store.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ParamStore<F>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = cur.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for ch in raw.chunks_exact(4) {
            let v = f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]);
            data.push(F::from_f64(v as f64));
        }
        store.insert(&name, shape, data)?;
    }
    if cur.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last checkpoint entry",
            buf.len() - cur.pos
        )));
    }
    Ok(store)
}
