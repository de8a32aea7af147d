//! Checkpoint container.
//!
//! Little-endian layout: magic `TMFN`; u32 version; u32 length + UTF-8
//! config text; u64 epoch; u64 RNG state; u32 tensor count; per tensor a
//! u32 name length + name bytes, u32 rank, rank x u64 dims, f32 payload.

use std::fs;
use std::path::Path;

use opchain_core::nn::{TMFNet, TMFNetConfig};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TMFN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub num_classes: usize,
    pub epoch: u64,
    pub rng_state: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(model: &mut TMFNet<f32>, config: &RunConfig, epoch: u64) -> Self {
        let mut tensors = Vec::new();
        model.visit(&mut |name, t, _| {
            tensors.push(NamedTensor { name: name.into(), shape: t.shape.clone(), data: t.data.clone() })
        });
        Self { config: config.clone(), num_classes: model.config().num_classes, epoch, rng_state: model.rng_state(), tensors }
    }

    pub fn model_config(&self) -> Result<TMFNetConfig> {
        self.config.model_config(self.num_classes)
    }

    /// Rebuilds the network and loads every tensor by name.
    pub fn restore(&self) -> Result<TMFNet<f32>> {
        let mut model = TMFNet::<f32>::new(self.model_config()?)?;
        let mut used = 0usize;
        let mut err = None;
        model.visit(&mut |name, t, _| {
            if err.is_some() {
                return;
            }
            match self.tensors.iter().find(|n| n.name == name) {
                Some(n) if n.shape == t.shape => {
                    t.data.copy_from_slice(&n.data);
                    used += 1;
                }
                Some(n) => err = Some(format!("tensor {name}: stored shape {:?}, model expects {:?}", n.shape, t.shape)),
                None => err = Some(format!("tensor {name} is missing")),
            }
        });
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        if used != self.tensors.len() {
            return Err(Error::Checkpoint(format!("{} stored tensors do not belong to the model", self.tensors.len() - used)));
        }
        model.set_rng_state(self.rng_state);
        Ok(model)
    }

    pub fn config_text(&self) -> String {
        format!("num_classes = {}\n{}", self.num_classes, self.config.to_toml())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config_text();
        b.extend_from_slice(&(text.len() as u32).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.rng_state.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            b.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            b.extend_from_slice(t.name.as_bytes());
            b.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let mut table: toml::Table = text.parse().map_err(|e| Error::Checkpoint(format!("config text: {e}")))?;
        let num_classes = table
            .remove("num_classes")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| Error::Checkpoint("config text lacks num_classes".into()))? as usize;
        let config = RunConfig::from_toml(&toml::to_string(&table).unwrap_or_default())?;
        let epoch = r.u64()?;
        let rng_state = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, num_classes, epoch, rng_state, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
