//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CKPT"
//! u32     format version (1)
//! u32     entry count
//! entry*  u32 name length, name bytes (utf-8)
//!         u32 ndim, u32 * ndim extents
//!         f32 * numel payload (little-endian)
//! ```
//!
//! Entries are written sorted by name, so identical contents produce
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { entries: Vec::new() }
    }

    pub fn insert<F: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<F>) {
        self.entries.push((name.into(), tensor.to_f32()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Capture every store entry (params, buffers, architecture weights).
    pub fn from_store<F: Scalar>(store: &ParamStore<F>) -> Self {
        let mut ckpt = Checkpoint::new();
        for (_, entry) in store.entries() {
            ckpt.insert(entry.name.clone(), &entry.value);
        }
        ckpt
    }

    /// Write every entry back into a store with identical layout.
    pub fn apply_to_store<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (name, tensor) in &self.entries {
            // optimizer/meta entries may coexist with model params
            let Some(id) = store.lookup(name) else { continue };
            if store.get(id).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: store {:?}, file {:?}",
                    store.get(id).shape(),
                    tensor.shape()
                )));
            }
            *store.get_mut(id) = tensor.map(|v| F::from_f64(v as f64));
        }
        for (_, entry) in store.entries() {
            if self.get(&entry.name).is_none() {
                return Err(Error::Checkpoint(format!("missing entry {}", entry.name)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut sorted: Vec<&(String, Tensor<f32>)> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(sorted.len() as u32).to_le_bytes())?;
        for (name, tensor) in sorted {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| Error::Checkpoint("truncated name".into()))?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-utf8 name".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint(format!("truncated payload in {name}")))?;
                data.push(f32::from_le_bytes(buf));
            }
            entries.push((
                name,
                Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?,
            ));
        }
        Ok(Checkpoint { entries })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated integer".into()))?;
    Ok(u32::from_le_bytes(buf))
}
