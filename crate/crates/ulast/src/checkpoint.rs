//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ULST" | version u32 | count u32 |
//!   count × ( name_len u16 | name | rank u8 | dims u32 × rank | values f32 × ∏dims )
//! | step u64 | config_len u32 | config JSON
//! ```
//!
//! The trailer after the parameter table carries the training step and the
//! run configuration the weights came from.

use std::path::Path;

use ulast_core::net::Model;
use ulast_core::tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ULST";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlob {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: Vec<ParamBlob>,
    pub step: u64,
    /// JSON snapshot of the run configuration; empty when unknown.
    pub config: String,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, config: String) -> Result<Self> {
        let mut params = Vec::with_capacity(model.params.len());
        for p in model.params.iter() {
            let dims = p
                .tensor
                .shape()
                .iter()
                .map(|&d| u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{}: dimension {d} too large", p.name))))
                .collect::<Result<Vec<_>>>()?;
            if dims.len() > u8::MAX as usize || p.name.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("{}: rank or name too long", p.name)));
            }
            params.push(ParamBlob { name: p.name.clone(), dims, values: p.tensor.data().iter().map(|&v| v as f32).collect() });
        }
        Ok(Checkpoint { version: VERSION, params, step, config })
    }

    /// Copies every blob into `model`. Names and shapes must match the
    /// model's parameter set one to one.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        let mut seen = vec![false; model.params.len()];
        for blob in &self.params {
            let id = model
                .params
                .find(&blob.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", blob.name)))?;
            if std::mem::replace(&mut seen[id.0], true) {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", blob.name)));
            }
            let dims: Vec<usize> = blob.dims.iter().map(|&d| d as usize).collect();
            let p = model.params.get_mut(id);
            if p.tensor.shape() != dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} does not match model {:?}",
                    blob.name,
                    dims,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(&dims, blob.values.iter().map(|&v| v as f64).collect())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.dims.len() as u8);
            for d in &p.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.fail_at(0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail_at(4, &format!("unsupported version {version}")));
        }
        let count = r.u32("parameter count")?;
        let mut params = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.fail_at(at + 2, "name is not UTF-8"))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")?);
            }
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let n = n.filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining())).ok_or_else(|| {
                r.fail_at(r.pos, &format!("{name}: {dims:?} needs more bytes than remain"))
            })?;
            let raw = r.take(4 * n, "values")?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.push(ParamBlob { name, dims, values });
        }
        let step = u64::from_le_bytes(r.take(8, "step")?.try_into().expect("8 bytes"));
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let config = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| r.fail_at(at, "config is not UTF-8"))?
            .to_string();
        if r.remaining() != 0 {
            return Err(r.fail_at(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint { version, params, step, config })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn fail_at(&self, offset: usize, detail: &str) -> Error {
        Error::Format { offset, detail: detail.to_string() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.fail_at(self.pos, &format!("truncated {what}: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(model: &Model, step: u64, config: String, path: &Path) -> Result<()> {
    let ck = Checkpoint::from_model(model, step, config)?;
    std::fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads weights into a freshly built `model` of matching architecture.
pub fn load_checkpoint(model: &mut Model, path: &Path) -> Result<Checkpoint> {
    let ck = read_checkpoint(path)?;
    ck.apply_to(model)?;
    Ok(ck)
}
