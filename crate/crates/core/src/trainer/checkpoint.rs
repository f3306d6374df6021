//! Binary checkpoints.
//!
//! ```text
//! "SE3D" | u32 version | u32 len | YAML {model, train}
//!        | u64 epochs | f64 best | u64 since_best | u64 adam step
//!        | table(params + buffers) | table(adam m) | table(adam v)
//! table  = u32 count, then per tensor:
//!          u32 name len | name | u32 rank | u32 dims.. | f32 LE data
//! ```
//! All integers are little-endian.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::trainer::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"SE3D";
pub const VERSION: u32 = 1;

/// Early-stopping bookkeeping carried across a resume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub epochs_done: usize,
    pub best_loss: f64,
    pub since_best: usize,
}

impl Default for Progress {
    fn default() -> Self {
        Self {
            epochs_done: 0,
            best_loss: f64::INFINITY,
            since_best: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub progress: Progress,
    /// Parameters then buffers, by name.
    pub tensors: Vec<(String, Tensor)>,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
}

impl Checkpoint {
    pub fn capture(model: &Model, train: &TrainConfig, adam: &AdamState, progress: Progress) -> Self {
        Self {
            model: model.config().clone(),
            train: train.clone(),
            progress,
            tensors: model
                .store()
                .named_tensors()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam: adam.clone(),
        }
    }

    /// Rebuilds the model, checking that every tensor is present exactly
    /// once with the shape the config implies.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone(), 0)?;
        let expected = model.store().named_tensors().count();
        let mut seen = HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Checkpoint(format!("tensor `{name}` appears twice")));
            }
            model.store_mut().load_named(name, t.clone())?;
        }
        if seen.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {expected}",
                seen.len()
            )));
        }
        let params = model.store().params();
        if self.adam.m.len() != params.len() || self.adam.v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameter count".into()));
        }
        for ((p, m), v) in params.iter().zip(&self.adam.m).zip(&self.adam.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("optimizer state for `{}` has the wrong shape", p.name)));
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let header = serde_yaml::to_string(&Header {
            model: self.model.clone(),
            train: self.train.clone(),
        })?;
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        put_u64(&mut out, self.progress.epochs_done as u64);
        out.extend_from_slice(&self.progress.best_loss.to_le_bytes());
        put_u64(&mut out, self.progress.since_best as u64);
        put_u64(&mut out, self.adam.step);
        put_table(&mut out, self.tensors.iter().map(|(n, t)| (n.as_str(), t)));
        let names: Vec<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
        put_table(&mut out, names.iter().copied().zip(&self.adam.m));
        put_table(&mut out, names.iter().copied().zip(&self.adam.v));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("version {version}, this build reads {VERSION}")));
        }
        let len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config record is not UTF-8".into()))?;
        let Header { model, train } = serde_yaml::from_str(header)?;
        let epochs_done = r.u64()? as usize;
        let best_loss = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let since_best = r.u64()? as usize;
        let step = r.u64()?;
        let tensors = r.table()?;
        let m = r.table()?.into_iter().map(|(_, t)| t).collect();
        let v = r.table()?.into_iter().map(|(_, t)| t).collect();
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            model,
            train,
            progress: Progress {
                epochs_done,
                best_loss,
                since_best,
            },
            tensors,
            adam: AdamState { step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_table<'a>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
    put_u32(out, items.len() as u32);
    for (name, t) in items {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn table(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let raw = self.take(n.and_then(|n| n.checked_mul(4)).unwrap_or(usize::MAX))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}
