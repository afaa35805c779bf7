//! Training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DNCP"  u32 version  u64 header_len  header (JSON)
//! u32 record_count
//! record*: u32 name_len  name  u8 dtype  u32 rank  u64 dims[rank]  u64 offset
//! payload
//! ```
//!
//! The header carries the model spec, the training schedule and progress
//! counters, and the optimizer hyperparameters. Each record names one tensor
//! and locates it in the payload; offsets are relative to the start of the
//! payload and records are stored back to back in manifest order. Records
//! hold the model parameters under their own names, running statistics as
//! `<bn>.running_mean` / `<bn>.running_var`, and Adam moments as
//! `adam.m/<param>` / `adam.v/<param>`.

use std::path::Path;

use densenet_core::arch::{Model, ModelSpec};
use densenet_core::optim::{AdamHyper, AdamState, Moments};
use densenet_core::{ParamStore, RunningStats, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"DNCP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// How a run draws its data. Fixed for the life of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub seed: u64,
    pub batch_size: usize,
    pub augment: bool,
    /// Fraction of the dataset held out for validation.
    pub holdout: f64,
}

/// Position of the training cursor. `batch` counts batches already taken
/// from the current epoch; `batches_done` counts optimizer steps overall.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: u64,
    pub batch: u64,
    pub batches_done: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamState,
    pub hyper: AdamHyper,
    pub schedule: Schedule,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    schedule: Schedule,
    progress: Progress,
    adam: AdamHyper,
    adam_step: u64,
    batch_norm: Vec<NormHeader>,
}

#[derive(Serialize, Deserialize)]
struct NormHeader {
    name: String,
    epsilon: f64,
    momentum: f64,
}

struct Record<'a> {
    name: String,
    shape: Vec<usize>,
    data: &'a [f64],
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.model.spec().clone(),
            schedule: self.schedule,
            progress: self.progress,
            adam: self.hyper,
            adam_step: self.optimizer.step,
            batch_norm: self
                .model
                .buffers()
                .iter()
                .map(|(name, s)| NormHeader {
                    name: name.clone(),
                    epsilon: s.epsilon,
                    momentum: s.momentum,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;

        let mut records = Vec::new();
        for p in self.model.params().iter() {
            records.push(Record {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data(),
            });
        }
        for (name, s) in self.model.buffers() {
            for (suffix, data) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                records.push(Record {
                    name: format!("{name}.{suffix}"),
                    shape: vec![data.len()],
                    data,
                });
            }
        }
        for m in &self.optimizer.moments {
            let shape = self.model.params().get(&m.name).map(|p| p.value.shape().to_vec());
            let shape = shape.ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter {}", m.name)))?;
            for (kind, data) in [("m", &m.m), ("v", &m.v)] {
                records.push(Record {
                    name: format!("adam.{kind}/{}", m.name),
                    shape: shape.clone(),
                    data,
                });
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for r in &records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * r.data.len() as u64;
        }
        for r in &records {
            for v in r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic { offset: 0 });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { version, offset: 4 });
        }
        let header_at = r.pos as u64 + 8;
        let len = r.u64()?;
        let json = r.take(len)?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Corrupt {
            offset: header_at + e.column() as u64,
            reason: format!("bad header: {e}"),
        })?;

        let count = r.u32()?;
        let mut manifest = Vec::new();
        let mut expected_offset = 0u64;
        for _ in 0..count {
            let at = r.pos as u64;
            let name_len = r.u32()?;
            let name = String::from_utf8(r.take(name_len as u64)?.to_vec()).map_err(|_| Error::Corrupt {
                offset: at + 4,
                reason: "record name is not UTF-8".into(),
            })?;
            let dtype_at = r.pos as u64;
            if r.u8()? != DTYPE_F64 {
                return Err(Error::Corrupt {
                    offset: dtype_at,
                    reason: format!("unsupported dtype for {name}"),
                });
            }
            let rank = r.u32()?;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let offset_at = r.pos as u64;
            let offset = r.u64()?;
            if offset != expected_offset {
                return Err(Error::Corrupt {
                    offset: offset_at,
                    reason: format!("record {name} at payload offset {offset}, expected {expected_offset}"),
                });
            }
            let n = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            let next = n.and_then(|n| n.checked_mul(8)).and_then(|b| b.checked_add(expected_offset));
            let Some(next) = next else {
                return Err(Error::Corrupt {
                    offset: at,
                    reason: format!("record {name} is too large"),
                });
            };
            let n = (next - expected_offset) as usize / 8;
            expected_offset = next;
            manifest.push((name, shape, n));
        }

        let payload_at = r.pos as u64;
        let remaining = (bytes.len() - r.pos) as u64;
        if remaining < expected_offset {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
                needed: expected_offset - remaining,
            });
        }
        if remaining > expected_offset {
            return Err(Error::Corrupt {
                offset: payload_at + expected_offset,
                reason: "trailing bytes after payload".into(),
            });
        }

        let mut params = ParamStore::new();
        let mut means = Vec::new();
        let mut vars = Vec::new();
        let mut m_moments = Vec::new();
        let mut v_moments = Vec::new();
        for (name, shape, n) in manifest {
            let at = r.pos as u64;
            let data: Vec<f64> = r.take(8 * n as u64)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let corrupt = |reason: String| Error::Corrupt { offset: at, reason };
            if let Some(p) = name.strip_prefix("adam.m/") {
                m_moments.push((p.to_string(), data));
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                v_moments.push((p.to_string(), data));
            } else if let Some(p) = name.strip_suffix(".running_mean") {
                means.push((p.to_string(), data));
            } else if let Some(p) = name.strip_suffix(".running_var") {
                vars.push((p.to_string(), data));
            } else {
                let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
                params.insert(name.clone(), t).map_err(|e| corrupt(e.to_string()))?;
            }
        }

        let mismatch = |what: &str| Error::Corrupt {
            offset: payload_at,
            reason: format!("inconsistent {what} records"),
        };
        if means.len() != vars.len() || means.len() != header.batch_norm.len() {
            return Err(mismatch("running-statistics"));
        }
        let mut buffers = Vec::new();
        for (((name, mean), (vname, var)), norm) in means.into_iter().zip(vars).zip(&header.batch_norm) {
            if name != vname || name != norm.name {
                return Err(mismatch("running-statistics"));
            }
            buffers.push((
                name,
                RunningStats {
                    mean,
                    var,
                    epsilon: norm.epsilon,
                    momentum: norm.momentum,
                },
            ));
        }
        if m_moments.len() != v_moments.len() {
            return Err(mismatch("optimizer"));
        }
        let mut moments = Vec::new();
        for ((name, m), (vname, v)) in m_moments.into_iter().zip(v_moments) {
            let len = params.get(&name).map(|p| p.value.len());
            if name != vname || len != Some(m.len()) || m.len() != v.len() {
                return Err(mismatch("optimizer"));
            }
            moments.push(Moments { name, m, v });
        }

        let model = Model::from_parts(header.spec, params, buffers).map_err(|e| Error::Corrupt {
            offset: payload_at,
            reason: e.to_string(),
        })?;
        Ok(Self {
            model,
            optimizer: AdamState {
                step: header.adam_step,
                moments,
            },
            hyper: header.adam,
            schedule: header.schedule,
            progress: header.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let left = (self.bytes.len() - self.pos) as u64;
        if n > left {
            return Err(Error::Truncated {
                offset: self.bytes.len() as u64,
                needed: n - left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
