//! Single-file little-endian checkpoints.
//!
//! Layout: magic `FMCK`, `u32` version, `u64` header length, JSON header
//! (model descriptor, partition, fingerprint, step), `u64` tensor count,
//! then per tensor in sorted name order: `u32` name length, UTF-8 name,
//! `u32` rank, `u64` per dimension, `f64` data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{Conditioning, Mode, ParameterPartition};
use crate::duration::{DurationConfig, DurationModel};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transformer::{BackboneConfig, Linear, ParamStore, TransformerStack, VectorFieldModel};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Module structure needed to rebuild a model around its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Acoustic {
        config: BackboneConfig,
        in_proj: Linear,
        stack: TransformerStack,
        out_proj: Linear,
        conditioning: Option<Conditioning>,
    },
    Duration {
        config: DurationConfig,
        stack: TransformerStack,
        head: Linear,
        conditioning: Option<Conditioning>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelDescriptor,
    partition: ParameterPartition,
    fingerprint: String,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelDescriptor,
    pub params: ParamStore,
    pub partition: ParameterPartition,
    pub fingerprint: String,
    pub step: u64,
}

impl Checkpoint {
    pub fn acoustic(model: &VectorFieldModel, partition: ParameterPartition, fingerprint: &str, step: u64) -> Self {
        Self {
            model: ModelDescriptor::Acoustic {
                config: model.config.clone(),
                in_proj: model.in_proj.clone(),
                stack: model.stack.clone(),
                out_proj: model.out_proj.clone(),
                conditioning: model.conditioning.clone(),
            },
            params: model.store.clone(),
            partition,
            fingerprint: fingerprint.to_string(),
            step,
        }
    }

    pub fn duration(model: &DurationModel, partition: ParameterPartition, fingerprint: &str, step: u64) -> Self {
        Self {
            model: ModelDescriptor::Duration {
                config: model.config.clone(),
                stack: model.stack.clone(),
                head: model.head.clone(),
                conditioning: model.conditioning.clone(),
            },
            params: model.store.clone(),
            partition,
            fingerprint: fingerprint.to_string(),
            step,
        }
    }

    pub fn has_adapters(&self) -> bool {
        match &self.model {
            ModelDescriptor::Acoustic { conditioning, .. } | ModelDescriptor::Duration { conditioning, .. } => {
                conditioning.is_some()
            }
        }
    }

    pub fn into_acoustic(self) -> Result<VectorFieldModel> {
        match self.model {
            ModelDescriptor::Acoustic {
                config,
                in_proj,
                stack,
                out_proj,
                conditioning,
            } => Ok(VectorFieldModel {
                config,
                store: self.params,
                in_proj,
                stack,
                out_proj,
                conditioning,
                mode: Mode::Eval,
            }),
            ModelDescriptor::Duration { .. } => Err(Error::invalid("checkpoint holds a duration model")),
        }
    }

    pub fn into_duration(self) -> Result<DurationModel> {
        match self.model {
            ModelDescriptor::Duration {
                config,
                stack,
                head,
                conditioning,
            } => Ok(DurationModel {
                config,
                store: self.params,
                stack,
                head,
                conditioning,
                mode: Mode::Eval,
            }),
            ModelDescriptor::Acoustic { .. } => Err(Error::invalid("checkpoint holds an acoustic model")),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            partition: self.partition.clone(),
            fingerprint: self.fingerprint.clone(),
            step: self.step,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let header_len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::format(origin, format!("header: {e}")))?;
        let count = r.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::format(origin, "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if params.contains(&name) {
                return Err(Error::format(origin, format!("duplicate parameter `{name}`")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes"));
        }
        header
            .partition
            .validate(&params)
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(Self {
            model: header.model,
            params,
            partition: header.partition,
            fingerprint: header.fingerprint,
            step: header.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// Loads and checks the fingerprint unless `allow_mismatch` is set.
    pub fn load_checked(path: impl AsRef<Path>, expected: &str, allow_mismatch: bool) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.fingerprint != expected && !allow_mismatch {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: ck.fingerprint,
            });
        }
        Ok(ck)
    }
}

/// SHA-256 of a file, hex encoded.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.origin, "truncated checkpoint"))?;
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
}
