//! Binary checkpoint: magic `TBGC`, u16 version, a canonical JSON metadata
//! string, named f64 tensors, CRC32 over every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{canonical_json, check_crc, sha256_hex, write_atomic, ByteReader, ByteWriter};
use crate::dense::Dense;
use crate::error::{Error, Result};
use crate::model::ModelParams;

use super::{AdamState, TrainConfig};

pub const CKPT_MAGIC: &[u8; 4] = b"TBGC";
pub const CKPT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Finetune,
    ZeroShot,
    Scratch,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::ZeroShot => "zero-shot",
            Stage::Scratch => "scratch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
    /// Fingerprints of every graph the parameters were trained against.
    pub fingerprints: BTreeMap<String, String>,
    /// Epoch whose parameters are stored.
    pub epoch: usize,
    /// Validation AUC per epoch, starting with the untrained parameters.
    pub history: Vec<f64>,
    pub edge_counts: BTreeMap<String, usize>,
    pub sources: Vec<String>,
    pub target: Option<String>,
    pub build_id: String,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    stage: Stage,
    config: TrainConfig,
    config_hash: String,
    fingerprints: BTreeMap<String, String>,
    epoch: usize,
    history: Vec<f64>,
    edge_counts: BTreeMap<String, usize>,
    sources: Vec<String>,
    target: Option<String>,
    build_id: String,
    params: Vec<TensorMeta>,
    adam_t: Option<u64>,
}

pub fn default_build_id() -> String {
    format!("tbg-core {}", env!("CARGO_PKG_VERSION"))
}

/// SHA-256 of the canonical JSON of a configuration.
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    Ok(sha256_hex(canonical_json(cfg)?.as_bytes()))
}

fn write_tensor(w: &mut ByteWriter, name: &str, m: &Dense) {
    w.str(name);
    w.u64(m.rows() as u64);
    w.u64(m.cols() as u64);
    for &x in m.as_slice() {
        w.f64(x);
    }
}

fn read_tensor(r: &mut ByteReader<'_>, expect: &str) -> Result<Dense> {
    let at = r.offset() as u64;
    let name = r.str()?;
    if name != expect {
        return Err(Error::Format { offset: at, message: format!("expected tensor `{expect}`, found `{name}`") });
    }
    let rows = r.u64()?;
    let cols = r.u64()?;
    let n = r.check_count(rows.saturating_mul(cols), 8)?;
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Dense::from_vec(rows as usize, cols as usize, data)
}

impl Checkpoint {
    pub fn config_hash(&self) -> Result<String> {
        config_hash(&self.config)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            stage: self.stage,
            config: self.config.clone(),
            config_hash: self.config_hash()?,
            fingerprints: self.fingerprints.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            edge_counts: self.edge_counts.clone(),
            sources: self.sources.clone(),
            target: self.target.clone(),
            build_id: self.build_id.clone(),
            params: self
                .params
                .blocks()
                .iter()
                .map(|b| TensorMeta { name: b.name.clone(), frozen: b.frozen })
                .collect(),
            adam_t: self.adam.as_ref().map(|a| a.t),
        };
        let mut w = ByteWriter::new(CKPT_MAGIC, CKPT_VERSION);
        w.str(&canonical_json(&meta)?);
        let n_adam = self.adam.as_ref().map_or(0, |a| a.moments.len());
        w.u32((self.params.blocks().len() + 2 * n_adam) as u32);
        for b in self.params.blocks() {
            write_tensor(&mut w, &format!("param:{}", b.name), &b.value);
        }
        if let Some(adam) = &self.adam {
            for (name, m, v) in &adam.moments {
                write_tensor(&mut w, &format!("adam_m:{name}"), m);
                write_tensor(&mut w, &format!("adam_v:{name}"), v);
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        check_crc(data)?;
        let mut r = ByteReader::open(data, CKPT_MAGIC, CKPT_VERSION)?;
        let at = r.offset() as u64;
        let meta: Meta = serde_json::from_str(&r.str()?)
            .map_err(|e| Error::Format { offset: at, message: format!("metadata: {e}") })?;
        if meta.config_hash != config_hash(&meta.config)? {
            return Err(Error::Format { offset: at, message: "config hash does not match stored config".into() });
        }
        let count = r.u32()? as usize;
        let mut params = ModelParams::default();
        for t in &meta.params {
            let value = read_tensor(&mut r, &format!("param:{}", t.name))?;
            params.push(t.name.clone(), value, t.frozen)?;
        }
        let adam = match meta.adam_t {
            None => None,
            Some(t) => {
                let mut moments = Vec::new();
                for b in params.blocks().iter().filter(|b| !b.frozen) {
                    let m = read_tensor(&mut r, &format!("adam_m:{}", b.name))?;
                    let v = read_tensor(&mut r, &format!("adam_v:{}", b.name))?;
                    moments.push((b.name.clone(), m, v));
                }
                Some(AdamState { t, moments })
            }
        };
        let expected = meta.params.len() + 2 * adam.as_ref().map_or(0, |a| a.moments.len());
        if count != expected {
            return Err(Error::Format {
                offset: at,
                message: format!("{count} tensors declared, {expected} described"),
            });
        }
        r.finish()?;
        Ok(Self {
            stage: meta.stage,
            config: meta.config,
            params,
            adam,
            fingerprints: meta.fingerprints,
            epoch: meta.epoch,
            history: meta.history,
            edge_counts: meta.edge_counts,
            sources: meta.sources,
            target: meta.target,
            build_id: meta.build_id,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
