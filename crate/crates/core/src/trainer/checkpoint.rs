//! Binary checkpoint, little-endian throughout:
//!
//! ```text
//! magic "VPLCKPT\0" | u32 version
//! str config            (resolved configuration text)
//! u64 next_epoch | u64 optimizer_steps
//! u32 branch count, then per branch:
//!   str role | u8 frozen
//!   u32 entries, each: str name | u8 trainable | tensor
//!   u64 adam step | u32 moments, each: str name | u64 len | f64×len m | f64×len v
//!   u8 has_ema [f64 decay_max | u8 warmup | u32 shadows, each: str name | tensor]
//! ```
//!
//! `str` is a u64 byte length followed by UTF-8; `tensor` is a u32 rank,
//! u64 dims and f32 data. All random streams are derived from the seed and
//! the epoch/batch counters, so the counters are the whole RNG state.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use super::config::{RunConfig, Role};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{AdamWConfig, EmaState, Moments, OptimState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VPLCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BranchSnapshot {
    pub role: Role,
    pub frozen: bool,
    pub store: ParamStore,
    pub optim: OptimState,
    pub ema: Option<EmaState>,
}

impl BranchSnapshot {
    /// Parameters used for evaluation: EMA shadows when present.
    pub fn eval_store(&self) -> Result<ParamStore> {
        match &self.ema {
            Some(e) => e.apply_to(&self.store),
            None => Ok(self.store.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub next_epoch: usize,
    pub optimizer_steps: u64,
    pub branches: Vec<BranchSnapshot>,
}

impl Checkpoint {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
            .map_err(|e| Error::Checkpoint(format!("embedded configuration is invalid: {e}")))
    }

    pub fn branch(&self, role: Role) -> Option<&BranchSnapshot> {
        self.branches.iter().find(|b| b.role == role)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Enc(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config_text);
        w.u64(self.next_epoch as u64);
        w.u64(self.optimizer_steps);
        w.u32(self.branches.len() as u32);
        for b in &self.branches {
            w.str(b.role.key());
            w.u8(b.frozen as u8);
            w.u32(b.store.len() as u32);
            for (name, e) in b.store.iter() {
                w.str(name);
                w.u8(e.trainable as u8);
                w.tensor(&e.tensor);
            }
            w.u64(b.optim.step);
            w.u32(b.optim.moments.len() as u32);
            for (name, m) in &b.optim.moments {
                w.str(name);
                w.u64(m.m.len() as u64);
                m.m.iter().chain(&m.v).for_each(|&v| w.f64(v));
            }
            match &b.ema {
                None => w.u8(0),
                Some(e) => {
                    w.u8(1);
                    w.f64(e.decay_max);
                    w.u8(e.warmup as u8);
                    w.u32(e.shadow.len() as u32);
                    for (name, t) in &e.shadow {
                        w.str(name);
                        w.tensor(t);
                    }
                }
            }
        }
        w.0
    }

    /// Parse a checkpoint; AdamW hyperparameters come from the embedded
    /// configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Dec { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let config_text = r.str()?;
        let config = RunConfig::parse(&config_text)
            .map_err(|e| Error::Checkpoint(format!("embedded configuration is invalid: {e}")))?;
        let next_epoch = r.u64()? as usize;
        let optimizer_steps = r.u64()?;
        let count = r.u32()?;
        let mut branches = Vec::new();
        for _ in 0..count {
            let role: Role = r.str()?.parse().map_err(Error::Checkpoint)?;
            let frozen = r.u8()? != 0;
            let mut store = ParamStore::new();
            for _ in 0..r.u32()? {
                let name = r.str()?;
                let trainable = r.u8()? != 0;
                store.insert(name, r.tensor()?, trainable)?;
            }
            let step = r.u64()?;
            let mut moments = IndexMap::new();
            for _ in 0..r.u32()? {
                let name = r.str()?;
                let len = r.u64()? as usize;
                let m = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let v = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                moments.insert(name, Moments { m, v });
            }
            let ema = if r.u8()? != 0 {
                let decay_max = r.f64()?;
                let warmup = r.u8()? != 0;
                let mut shadow = IndexMap::new();
                for _ in 0..r.u32()? {
                    let name = r.str()?;
                    shadow.insert(name, r.tensor()?);
                }
                Some(EmaState {
                    decay_max,
                    warmup,
                    shadow,
                })
            } else {
                None
            };
            let adamw: AdamWConfig = config.branch(role).adamw;
            branches.push(BranchSnapshot {
                role,
                frozen,
                store,
                optim: OptimState {
                    config: adamw,
                    step,
                    moments,
                },
                ema,
            });
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last branch",
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint {
            config_text,
            next_epoch,
            optimizer_steps,
            branches,
        })
    }

    /// Write through a temporary file and rename, so an interrupted save
    /// leaves the previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|&d| self.u64(d as u64));
        t.data().iter().for_each(|v| self.0.extend(v.to_le_bytes()));
    }
}

struct Dec<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
