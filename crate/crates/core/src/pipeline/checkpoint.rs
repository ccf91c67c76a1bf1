//! Checkpoint container, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "MVICKPT\0"
//! version u32      1
//! header  u64 length + UTF-8 JSON {model, train, step, rng_seed}
//! 3 tensor sections (parameters, Adam m, Adam v), each:
//!   u32 count, then per tensor in name order:
//!     u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{read_file, write_file};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;

use super::{AdamState, PipelineError, Result, TrainConfig};

const MAGIC: &[u8; 8] = b"MVICKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Steps completed in the current stage.
    pub step: u64,
    /// Batch sampling is a pure function of this seed and the step index,
    /// so the pair is the whole sampler state.
    pub rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    rng_seed: u64,
}

impl Checkpoint {
    pub fn new(model: &Model, train: TrainConfig) -> Self {
        Self {
            model: model.config().clone(),
            params: model.params().clone(),
            adam: AdamState::new(model.params()),
            step: 0,
            rng_seed: train.seed,
            train,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model::from_parts(self.model.clone(), self.params.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            rng_seed: self.rng_seed,
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let params: BTreeMap<&String, &Tensor> = self.params.iter().collect();
        write_section(&mut out, params.into_iter());
        write_section(&mut out, self.adam.m.iter());
        write_section(&mut out, self.adam.v.iter());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(PipelineError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(PipelineError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| PipelineError::Checkpoint(format!("bad header: {e}")))?;
        let mut params = ParamStore::new();
        for (k, t) in r.section()? {
            params.insert(k, t);
        }
        let m = r.section()?;
        let v = r.section()?;
        if r.pos != bytes.len() {
            return Err(PipelineError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        // validates names and shapes against the configuration
        Model::from_parts(header.model.clone(), params.clone())?;
        Ok(Self {
            model: header.model,
            train: header.train,
            params,
            adam: AdamState { t: header.step, m, v },
            step: header.step,
            rng_seed: header.rng_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn write_section<'a>(out: &mut Vec<u8>, it: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>) {
    out.extend_from_slice(&(it.len() as u32).to_le_bytes());
    for (name, t) in it {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PipelineError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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

    fn section(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| PipelineError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = self.take(numel.checked_mul(8).ok_or_else(|| PipelineError::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(out)
    }
}
