//! "CAPC" checkpoint files, little-endian throughout:
//!
//! ```text
//! magic "CAPC" | version u32
//! config_len u32 | config UTF-8: "key=value" lines
//!     model.<key>   model configuration
//!     train.<key>   training configuration
//!     vocab         space-separated tokens in id order
//! seed u64 | step u64 | adam_t u64
//! count u32 | per tensor: name_len u32 | name UTF-8 | ndim u32 | dims u32[ndim] | data f32[numel]
//! ```
//!
//! Tensor names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.
//! The data RNG needs no state beyond the seed and step: every draw is keyed
//! by them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::optim::AdamState;
use super::TrainConfig;
use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::tensor::Tensor;
use crate::tok::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CAPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocab,
    pub params: Params<f32>,
    pub opt: AdamState<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

fn config_block(ckpt: &Checkpoint) -> String {
    let mut s = String::new();
    for (k, v) in ckpt.model.to_kv() {
        s.push_str(&format!("model.{k}={v}\n"));
    }
    for (k, v) in ckpt.train.to_kv() {
        s.push_str(&format!("train.{k}={v}\n"));
    }
    s.push_str(&format!("vocab={}\n", ckpt.vocab.tokens().join(" ")));
    s
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = config_block(ckpt);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&ckpt.train.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.opt.t.to_le_bytes());
    let tables = [("param/", &ckpt.params), ("adam.m/", &ckpt.opt.m), ("adam.v/", &ckpt.opt.v)];
    let count: usize = tables.iter().map(|(_, p)| p.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, p) in tables {
        for (name, t) in p.iter() {
            put_tensor(&mut out, &format!("{prefix}{name}"), t);
        }
    }
    out
}

fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig, Vocab)> {
    let mut model = BTreeMap::new();
    let mut train = Vec::new();
    let mut vocab = None;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("config line {line:?} lacks '='")))?;
        if let Some(k) = k.strip_prefix("model.") {
            model.insert(k.to_owned(), v.to_owned());
        } else if let Some(k) = k.strip_prefix("train.") {
            train.push((k.to_owned(), v.to_owned()));
        } else if k == "vocab" {
            vocab = Some(v.split(' ').collect::<Vec<_>>().join("\n"));
        } else {
            return Err(Error::Format(format!("unknown config key {k:?}")));
        }
    }
    let bad = |e: Error| Error::Format(format!("checkpoint config: {e}"));
    let model = ModelConfig::from_kv(&model).map_err(bad)?;
    let mut tc = TrainConfig::new(1);
    let keys: BTreeSet<&str> = train.iter().map(|(k, _)| k.as_str()).collect();
    if let Some(missing) = TrainConfig::KEYS.iter().find(|k| !keys.contains(*k)) {
        return Err(Error::Format(format!("checkpoint config lacks train.{missing}")));
    }
    for (k, v) in &train {
        tc.apply_kv(k, v).map_err(bad)?;
    }
    let vocab =
        Vocab::from_text(&vocab.ok_or_else(|| Error::Format("checkpoint config lacks vocab".into()))?).map_err(bad)?;
    Ok((model, tc, vocab))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing CAPC magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let (model, mut train, vocab) = parse_config(text)?;
    let seed = r.u64()?;
    if seed != train.seed {
        return Err(Error::Format(format!("seed {seed} disagrees with train.seed {}", train.seed)));
    }
    train.seed = seed;
    let step = r.u64()?;
    let t = r.u64()?;
    let count = r.u32()? as usize;
    let (mut params, mut m, mut v) = (Params::new(), Params::new(), Params::new());
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("shape overflow".into()))?;
        let data = Tensor::new(shape, r.f32s(numel)?)?;
        let (table, key) = if let Some(k) = name.strip_prefix("param/") {
            (&mut params, k)
        } else if let Some(k) = name.strip_prefix("adam.m/") {
            (&mut m, k)
        } else if let Some(k) = name.strip_prefix("adam.v/") {
            (&mut v, k)
        } else {
            return Err(Error::Format(format!("unknown tensor {name:?}")));
        };
        if table.insert(key, data).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name:?}")));
        }
    }
    r.finish()?;
    Ok(Checkpoint { model, train, vocab, params, opt: AdamState { m, v, t }, step })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
