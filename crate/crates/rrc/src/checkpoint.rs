//! Binary checkpoints.
//!
//! Layout (little endian): magic `RRC1`, `u32` version, `u64` config hash,
//! `u64` step, `u32` tensor count, then per tensor `u32` name length, the
//! UTF-8 name, `u32` rank, `u64` extents and `f64` values. Momentum buffers
//! are stored as `momentum/<name>`.

use std::path::Path;

use rrc_core::{ParamStore, Tensor};

use crate::error::{io, Error, Result};

const MAGIC: &[u8; 4] = b"RRC1";
const VERSION: u32 = 1;
const MOMENTUM: &str = "momentum/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, config_hash: u64, step: u64) -> Self {
        let mut tensors = Vec::with_capacity(2 * store.len());
        for id in store.ids() {
            tensors.push((store.name(id).to_string(), store.value(id).clone()));
        }
        for id in store.ids() {
            tensors.push((format!("{MOMENTUM}{}", store.name(id)), store.momentum(id).clone()));
        }
        Self {
            config_hash,
            step,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(r.fail("not an RRC1 checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = match std::str::from_utf8(r.take(len)?) {
                Ok(n) => n.to_string(),
                Err(_) => return Err(r.fail("tensor name is not UTF-8")),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| r.fail("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.fail(&format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes after the last tensor"));
        }
        Ok(Self {
            config_hash,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Writes values and momentum into `store`, which must hold exactly the
    /// checkpoint's parameters.
    pub fn restore(&self, store: &mut ParamStore, expected_hash: u64) -> Result<()> {
        if self.config_hash != expected_hash {
            return Err(Error::ConfigMismatch {
                expected: expected_hash,
                found: self.config_hash,
            });
        }
        let mut values = Vec::new();
        let mut momenta = std::collections::HashMap::new();
        for (name, t) in &self.tensors {
            match name.strip_prefix(MOMENTUM) {
                Some(base) => {
                    momenta.insert(base, t);
                }
                None => values.push((name.as_str(), t)),
            }
        }
        if values.len() != store.len() {
            return Err(rrc_core::Error::Contract(format!(
                "checkpoint holds {} parameters, model has {}",
                values.len(),
                store.len()
            ))
            .into());
        }
        for (name, t) in values {
            store.load(name, t.clone(), momenta.get(name).map(|m| (*m).clone()))?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, message: &str) -> Error {
        Error::Format {
            path: self.origin.to_path_buf(),
            message: format!("{message} (byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
