//! Binary checkpoint: parameters, optimizer moments and step counter.
//!
//! Layout (little-endian): `SGVL`, u32 version, u32 element width in bytes,
//! u32 config length + JSON config, u64 step, u64 optimizer step, u32 tensor
//! count, then per tensor u32 name length, name, u32 rank, u32 dims, data.
//! Optimizer moments are stored as `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Element, ParamStore, Tensor};
use crate::util;

const MAGIC: &[u8; 4] = b"SGVL";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Element> Checkpoint<T> {
    pub fn new(model: Model<T>) -> Self {
        let adam = AdamState::new(model.params());
        Self { model, adam, step: 0 }
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        let json = serde_json::to_vec(self.model.config())?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        let params = self.model.params();
        out.extend_from_slice(&((params.len() * 3) as u32).to_le_bytes());
        for (i, p) in params.iter().enumerate() {
            write_tensor(&mut out, &p.name, &p.value);
            write_tensor(&mut out, &format!("adam.m/{}", p.name), &self.adam.m[i]);
            write_tensor(&mut out, &format!("adam.v/{}", p.name), &self.adam.v[i]);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let width = r.u32()? as usize;
        if width != T::BYTES {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {}-bit elements, {}-bit requested",
                width * 8,
                T::BYTES * 8
            )));
        }
        let len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
        config.validate()?;
        let step = r.u64()?;
        let adam_t = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut moments = std::collections::HashMap::new();
        for _ in 0..count {
            let (name, tensor) = r.tensor::<T>()?;
            if name.starts_with("adam.") {
                moments.insert(name, tensor);
            } else {
                if params.id(&name).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
                }
                params.add(name, tensor);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        let model = Model::from_params(config, params)?;
        let mut adam = AdamState::new(model.params());
        adam.t = adam_t;
        for (i, p) in model.params().iter().enumerate() {
            for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("adam.{kind}/{}", p.name);
                match moments.remove(&key) {
                    Some(t) if t.shape() == p.value.shape() => *slot = t,
                    Some(t) => {
                        return Err(Error::Checkpoint(format!(
                            "{key}: expected {:?}, found {:?}",
                            p.value.shape(),
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Checkpoint(format!("{key}: missing"))),
                }
            }
        }
        if let Some(extra) = moments.keys().next() {
            return Err(Error::Checkpoint(format!("{extra}: unexpected")));
        }
        Ok(Self { model, adam, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(util::sha256_hex(&self.to_bytes()?))
    }
}

fn write_tensor<T: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Element>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if rank > crate::numerics::MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
        }
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(T::BYTES).ok_or_else(|| {
            Error::Checkpoint(format!("{name}: size overflow"))
        })?)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}
