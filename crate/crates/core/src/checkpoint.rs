//! `.nnck` checkpoint container.
//!
//! Layout (all integers little-endian u32, payload little-endian f32):
//!
//! ```text
//! "NNCK" | version=1 | count
//! count x ( name_len | name (utf-8) | rank | dims[rank] | payload[prod(dims)] )
//! crc32 of every preceding byte
//! ```
//!
//! Entries are written in name order, so equal models give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models;
use crate::nn::{ModelGraph, ModelKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NNCK";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "nnck";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor<f32>>,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::CorruptCheckpoint(msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return corrupt(format!(
                "truncated at byte {} (needed {n} more, {} left)",
                self.pos,
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(tensors: BTreeMap<String, Tensor<f32>>) -> Self {
        Self { tensors }
    }

    pub fn from_model<S: Scalar>(model: &ModelGraph<S>) -> Self {
        Self {
            tensors: model
                .params()
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.tensors
    }

    /// Model kind implied by the parameter name prefix.
    pub fn kind(&self) -> Option<ModelKind> {
        let first = self.tensors.keys().next()?;
        [
            ModelKind::Generator,
            ModelKind::Discriminator,
            ModelKind::Classifier,
        ]
        .into_iter()
        .find(|k| first.starts_with(&format!("{}.", k.prefix())))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return corrupt(format!("file too short ({} bytes)", bytes.len()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return corrupt(format!(
                "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
            ));
        }
        let mut r = Reader {
            bytes: body,
            pos: 0,
        };
        if r.take(4)? != MAGIC {
            return corrupt("bad magic, expected NNCK");
        }
        let version = r.u32()?;
        if version != VERSION {
            return corrupt(format!("unsupported version {version}"));
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::CorruptCheckpoint("tensor too large".into()))?,
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data)
                .map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return corrupt(format!("duplicate tensor {name}"));
            }
        }
        if r.pos != body.len() {
            return corrupt(format!("{} trailing bytes", body.len() - r.pos));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads these tensors into an existing topology.
    pub fn restore<S: Scalar>(&self, model: &mut ModelGraph<S>) -> Result<()> {
        let cast = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect();
        model.load_state(&cast)
    }
}

pub fn save_checkpoint<S: Scalar>(model: &ModelGraph<S>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

/// Loads a checkpoint into the default topology of `kind`.
pub fn load_model<S: Scalar>(kind: ModelKind, path: impl AsRef<Path>) -> Result<ModelGraph<S>> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = models::build(kind, 0)?;
    ckpt.restore(&mut model)?;
    Ok(model)
}

/// Loads a checkpoint, choosing the topology from its parameter names.
pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<ModelGraph<S>> {
    let ckpt = Checkpoint::load(path)?;
    let kind = ckpt.kind().ok_or_else(|| {
        Error::CorruptCheckpoint("cannot infer model kind from parameter names".into())
    })?;
    let mut model = models::build(kind, 0)?;
    ckpt.restore(&mut model)?;
    Ok(model)
}
