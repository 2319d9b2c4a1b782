//! Binary vocabulary (`PVOC`) and checkpoint (`SMCK`) files.
//!
//! All integers and floats are little-endian.
//!
//! Vocabulary, 28-byte header then the matrix:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `PVOC`                            |
//! | 4      | 4    | version (`u32`, currently 1)            |
//! | 8      | 1    | kind (0 projection, 1 patches, 2 k-means) |
//! | 9      | 1    | patch norm (0 none, 1 mean-subtract)    |
//! | 10     | 2    | reserved, zero                          |
//! | 12     | 4    | `V` (`u32`)                             |
//! | 16     | 4    | `d` (`u32`)                             |
//! | 20     | 8    | seed (`u64`)                            |
//! | 28     | 4·V·d | row-major `f32` codebook               |
//!
//! Checkpoint: magic `SMCK`, version `u32`, metadata length `u32`, UTF-8 TOML
//! metadata ([`CheckpointMeta`]), parameter count `u32`, then per parameter:
//! name length `u32`, UTF-8 name, rank `u32`, `rank × u32` dims, `f32` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use splitmask_core::model::{ModelConfig, ModelParams};
use splitmask_core::tokenizer::{PatchNorm, VocabKind, Vocabulary};
use splitmask_core::Tensor;

use crate::error::{Error, Result};

pub const VOCAB_MAGIC: &[u8; 4] = b"PVOC";
pub const VOCAB_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Data(format!("{} truncated at byte {}", self.what, self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::Data(format!("{} size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn magic(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Data(format!("{}: bad magic, expected {:?}", self.what, std::str::from_utf8(magic).unwrap())));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Data(format!("{}: unsupported version {}", self.what, v)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Data(format!("{}: {} trailing bytes", self.what, self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_vocabulary(vocab: &Vocabulary) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * vocab.size() * vocab.dim());
    out.extend_from_slice(VOCAB_MAGIC);
    out.extend_from_slice(&VOCAB_VERSION.to_le_bytes());
    out.push(vocab.kind().code());
    out.push(vocab.norm().code());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(vocab.size() as u32).to_le_bytes());
    out.extend_from_slice(&(vocab.dim() as u32).to_le_bytes());
    out.extend_from_slice(&vocab.seed().to_le_bytes());
    put_f32s(&mut out, vocab.vectors().data());
    out
}

pub fn decode_vocabulary(bytes: &[u8]) -> Result<Vocabulary> {
    let mut r = Reader::new(bytes, "vocabulary file");
    r.magic(VOCAB_MAGIC, VOCAB_VERSION)?;
    let kind = r.u8()?;
    let kind = VocabKind::from_code(kind).ok_or_else(|| Error::Data(format!("unknown vocabulary kind {}", kind)))?;
    let norm = r.u8()?;
    let norm = PatchNorm::from_code(norm).ok_or_else(|| Error::Data(format!("unknown patch norm {}", norm)))?;
    r.take(2)?;
    let size = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let seed = r.u64()?;
    let data = r.f32s(size * dim)?;
    r.finish()?;
    let vectors = Tensor::new(&[size, dim], data)?;
    Vocabulary::new(kind, seed, norm, vectors).map_err(|e| Error::Data(format!("vocabulary file: {}", e)))
}

pub fn save_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_file(path, &encode_vocabulary(vocab))
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    decode_vocabulary(&read_file(path)?).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

/// Everything besides the weights needed to resume or evaluate a model.
/// Training randomness is a pure function of `(seed, step)`, so the pair is
/// the complete generator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub code_version: String,
    pub step: u64,
    pub seed: u64,
    pub num_classes: Option<usize>,
    pub model: ModelConfig,
}

impl CheckpointMeta {
    pub fn new(params: &ModelParams<f32>, step: u64, seed: u64) -> Self {
        Self {
            code_version: crate::CODE_VERSION.to_string(),
            step,
            seed,
            num_classes: params.num_classes(),
            model: params.config().clone(),
        }
    }
}

pub fn encode_checkpoint(meta: &CheckpointMeta, params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let text = toml::to_string(meta).map_err(|e| Error::Config(format!("checkpoint metadata: {}", e)))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.params().len() as u32).to_le_bytes());
    for p in params.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, p.value.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, ModelParams<f32>)> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Data("checkpoint metadata is not UTF-8".into()))?;
    let meta: CheckpointMeta = toml::from_str(text).map_err(|e| Error::Data(format!("checkpoint metadata: {}", e)))?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(shape.iter().product())?;
        named.push((name, Tensor::new(&shape, data)?));
    }
    r.finish()?;
    let params = ModelParams::from_named(&meta.model, meta.num_classes, named)?;
    Ok((meta, params))
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &ModelParams<f32>) -> Result<()> {
    write_file(path, &encode_checkpoint(meta, params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ModelParams<f32>)> {
    decode_checkpoint(&read_file(path)?).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

/// Loads a checkpoint and insists its architecture equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<(CheckpointMeta, ModelParams<f32>)> {
    let (meta, params) = load_checkpoint(path)?;
    if &meta.model != expected {
        return Err(Error::Config(format!(
            "model config mismatch: checkpoint {} has {:?}, run expects {:?}",
            path.display(),
            meta.model,
            expected
        )));
    }
    Ok((meta, params))
}
