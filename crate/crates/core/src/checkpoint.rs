//! Versioned binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CFCK" | version u32 | count u32
//! count × { name_len u16 | name utf-8 | ndim u8 | dims u32[ndim] | f32[numel] }
//! optional trailer: meta_len u32 | meta JSON
//! ```
//!
//! The trailer carries the model configuration and training rng state.
//! Readers that stop after the tensor table see a complete weight file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CtrlFuse, ModelConfig};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"CFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, decimal.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub rng: Option<RngState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub meta: Option<CheckpointMeta>,
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return fmt_err(format!(
                "truncated reading {what} at byte {} ({} bytes left, {n} needed)",
                self.pos,
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Checkpoint {
    /// Snapshot of every parameter, frozen ones included, in store order.
    pub fn from_model(model: &CtrlFuse, train: Option<&TrainConfig>, rng: Option<RngState>) -> Self {
        let tensors = model
            .store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                dims: e.value.shape().to_vec(),
                data: e.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            tensors,
            meta: Some(CheckpointMeta {
                model: model.config.clone(),
                train: train.cloned(),
                rng,
            }),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4 + 64).sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("name too long: {}", t.name)))?;
            let ndim = u8::try_from(t.dims.len())
                .map_err(|_| Error::Format(format!("too many dims in {}", t.name)))?;
            let numel: usize = t.dims.iter().product();
            if numel != t.data.len() {
                return fmt_err(format!(
                    "{}: dims {:?} hold {numel} values, payload has {}",
                    t.name,
                    t.dims,
                    t.data.len()
                ));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(ndim);
            for &d in &t.dims {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(meta) = &self.meta {
            let json = serde_json::to_vec(meta)?;
            let len = u32::try_from(json.len()).map_err(|_| Error::Format("meta too large".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(&json);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return fmt_err("bad magic, expected CFCK");
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format(format!("tensor {i}: name is not utf-8")))?
                .to_owned();
            let ndim = r.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("dims")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("{name}: dims {dims:?} overflow")))?;
            let raw = r.take(numel, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        let meta = if r.done() {
            None
        } else {
            let len = r.u32("meta length")? as usize;
            let json = r.take(len, "meta")?;
            if !r.done() {
                return fmt_err(format!("{} trailing bytes", bytes.len() - r.pos));
            }
            Some(serde_json::from_slice(json).map_err(|e| Error::Format(format!("meta: {e}")))?)
        };
        Ok(Self { tensors, meta })
    }

    /// Writes through a temporary sibling so a crash never leaves a
    /// half-written file under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("cfck.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Rebuilds the model from the echoed configuration and overwrites every
    /// parameter. Names and shapes must match exactly.
    pub fn to_model(&self) -> Result<CtrlFuse> {
        let meta = self
            .meta
            .as_ref()
            .ok_or_else(|| Error::Format("no model configuration in checkpoint".into()))?;
        let mut model = CtrlFuse::new(meta.model.clone())?;
        if self.tensors.len() != model.store.len() {
            return fmt_err(format!(
                "{} tensors for a model with {} parameters",
                self.tensors.len(),
                model.store.len()
            ));
        }
        let mut staged = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let id = model
                .store
                .by_name(&t.name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {}", t.name)))?;
            if model.store.get(id).shape() != t.dims.as_slice() {
                return fmt_err(format!(
                    "{}: stored {:?}, model expects {:?}",
                    t.name,
                    t.dims,
                    model.store.get(id).shape()
                ));
            }
            let data = t.data.iter().map(|&v| v as f64).collect();
            staged.push((id, Tensor::new(&t.dims, data)?));
        }
        for (id, value) in staged {
            *model.store.get_mut(id) = value;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                NamedTensor {
                    name: "a".into(),
                    dims: vec![2],
                    data: vec![1.0, -2.5],
                },
                NamedTensor {
                    name: "b.w".into(),
                    dims: vec![1, 2, 1],
                    data: vec![0.1, f32::MAX],
                },
            ],
            meta: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = tiny();
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = tiny().encode().unwrap();
        for n in 0..bytes.len() {
            let r = Checkpoint::decode(&bytes[..n]);
            assert!(matches!(r, Err(Error::Format(_))), "cut at {n}: {r:?}");
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = tiny().encode().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Version(7))));
    }

    #[test]
    fn bad_magic_and_trailing_garbage() {
        let mut bytes = tiny().encode().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(_))));
        let mut bytes = tiny().encode().unwrap();
        bytes.extend_from_slice(&[2, 0, 0, 0, b'{', b'}', 9]);
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_payload_refuses_to_encode() {
        let mut c = tiny();
        c.tensors[0].data.push(3.0);
        assert!(c.encode().is_err());
    }
}
