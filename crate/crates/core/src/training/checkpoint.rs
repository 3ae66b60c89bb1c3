//! Versioned binary checkpoints: magic, version, config digest, metadata,
//! then every registry entry as (name, shape, little-endian f32 data).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OptimizerState;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Stage};
use crate::params::ParamRegistry;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SKLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: Stage,
    /// Categories the model was trained to query.
    pub categories: Vec<String>,
    pub params: ParamRegistry<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    stage: Stage,
    categories: Vec<String>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, categories: Vec<String>, optimizer: Option<OptimizerState<f32>>) -> Self {
        Self {
            config: model.config().clone(),
            stage: model.stage(),
            categories,
            params: model.params().clone(),
            optimizer,
        }
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }

    /// Rebuilds the model; every parameter must be present.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let (model, fresh) = Model::from_registry(self.config.clone(), self.stage, 0, &self.params)?;
        if let Some(name) = fresh.first() {
            return Err(Error::Checkpoint(format!("checkpoint lacks parameter {name}")));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.digest().as_bytes());
        let meta = Meta {
            config: self.config.clone(),
            stage: self.stage,
            categories: self.categories.clone(),
        };
        put_bytes(&mut out, serde_json::to_string(&meta).expect("metadata serializes").as_bytes());
        put_registry(&mut out, &self.params);
        match &self.optimizer {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                out.extend_from_slice(&st.lr.to_le_bytes());
                put_registry(&mut out, &st.velocity);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let digest = r.string()?;
        let meta: Meta = serde_json::from_str(&r.string()?)?;
        let found = meta.config.digest();
        if found != digest {
            return Err(Error::DigestMismatch { expected: digest, found });
        }
        let params = r.registry()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let lr = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                Some(OptimizerState {
                    velocity: r.registry()?,
                    step,
                    lr,
                })
            }
            t => return Err(Error::Checkpoint(format!("bad optimizer tag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config: meta.config,
            stage: meta.stage,
            categories: meta.categories,
            params,
            optimizer,
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_registry(out: &mut Vec<u8>, reg: &ParamRegistry<f32>) {
    out.extend_from_slice(&(reg.len() as u32).to_le_bytes());
    for p in reg.entries() {
        put_bytes(out, p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.data {
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
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    fn registry(&mut self) -> Result<ParamRegistry<f32>> {
        let count = self.u32()?;
        let mut reg = ParamRegistry::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = self
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            reg.register(&name, &shape, data)?;
        }
        Ok(reg)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, checking only its internal consistency.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Reads a checkpoint and verifies it was written for `expected`.
pub fn load_checkpoint(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    let (want, found) = (expected.digest(), ckpt.digest());
    if want != found {
        return Err(Error::DigestMismatch { expected: want, found });
    }
    Ok(ckpt)
}
