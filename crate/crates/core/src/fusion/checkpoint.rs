//! Binary checkpoint format.
//!
//! Little-endian throughout: `"FFCK"`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64` extents
//! and `f64` values; finally a `u32`-length-prefixed JSON [`ModelConfig`].

use std::path::{Path, PathBuf};

use super::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("checkpoint configuration rejected: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let entries = model.store().entries();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated(self.buf.len()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses and validates a checkpoint. Nothing is built unless every tensor
/// matches the architecture described by the embedded configuration.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Malformed(format!("extent of {name} overflows")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some());
        let Some(n) = n else {
            return Err(CheckpointError::Malformed(format!("tensor {name} is too large")));
        };
        if n * 8 > r.remaining() {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    if r.remaining() != 0 {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.remaining())));
    }

    let mut model = Model::new(config, 0).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let store = model.store();
    let mut ids = Vec::with_capacity(tensors.len());
    for (name, shape, _) in &tensors {
        let id = store.id(name).ok_or_else(|| CheckpointError::UnexpectedTensor(name.clone()))?;
        let expected = store.get(id).shape();
        if expected != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: expected.to_vec(),
                found: shape.clone(),
            });
        }
        if ids.contains(&id) {
            return Err(CheckpointError::Malformed(format!("tensor {name} appears twice")));
        }
        ids.push(id);
    }
    if let Some(e) = store.entries().iter().find(|e| !tensors.iter().any(|t| t.0 == e.name)) {
        return Err(CheckpointError::MissingTensor(e.name.clone()));
    }
    for (id, (_, shape, data)) in ids.into_iter().zip(tensors) {
        *model.store_mut().get_mut(id) = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
