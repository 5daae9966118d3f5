//! `DWCK` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | field        | type                         |
//! |--------------|------------------------------|
//! | magic        | `b"DWCK"`                    |
//! | version      | `u32 = 1`                    |
//! | meta length  | `u64`                        |
//! | meta         | UTF-8 JSON [`CheckpointMeta`] |
//! | tensor count | `u64`                        |
//! | per tensor   | `u16` path length, UTF-8 path, `u8` rank, `u64` dims, `f32` data |
//!
//! Tensors are written in path order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Network};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::Tensor;

const MAGIC: &[u8; 4] = b"DWCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: u64,
    /// Seed of the training stream; the stream position is a function of `step`.
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            }),
        }
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

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Format {
            offset: at,
            msg: format!("{what} {v} exceeds the address space"),
        })
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, step: u64, rng_seed: u64, params: ParamStore<f32>) -> Self {
        Self {
            meta: CheckpointMeta { config, step, rng_seed },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(16 + meta.len() + 4 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (path, t) in self.params.iter() {
            let len = u16::try_from(path.len())
                .map_err(|_| Error::invalid("checkpoint", format!("path {path} longer than 65535 bytes")))?;
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::invalid("checkpoint", format!("{path} has rank above 255")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected \"DWCK\"".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let meta_len = r.len("metadata length")?;
        let meta_at = r.pos as u64;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Format {
            offset: meta_at,
            msg: format!("metadata: {e}"),
        })?;
        let count = r.u64("tensor count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u16("path length")? as usize;
            let path = std::str::from_utf8(r.take(len, "path")?)
                .map_err(|_| Error::Format {
                    offset: at + 2,
                    msg: "path is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.len("dimension")?);
            }
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
                offset: r.pos as u64,
                msg: format!("{path}: dims {dims:?} overflow"),
            })?;
            let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if params.insert(path.clone(), Tensor::new(dims, data)?).is_some() {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("duplicate tensor {path}"),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: "trailing bytes after the last tensor".into(),
            });
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Builds the stored model and checks the parameter set against it.
    pub fn network(&self) -> Result<Network> {
        let net = Network::new(&self.meta.config)?;
        self.check_compatible(&net)?;
        Ok(net)
    }

    /// Errors, naming the first offending path, unless the parameters match `net` exactly.
    pub fn check_compatible(&self, net: &Network) -> Result<()> {
        self.params.check_against(&net.specs())
    }
}
