//! Resumable training state.
//!
//! Little-endian layout:
//!
//! ```text
//! magic            4 bytes  "MFAT"
//! version          u32      1
//! step             u64
//! rng              32-byte seed, u64 stream, u128 word position (two u64, low first)
//! config echo      u32 length + UTF-8 TOML of the training configuration
//! model            embedded model file (see `model::checkpoint`)
//! adam step        u64
//! moments          u32 count, then count first moments and count second moments
//! ```

use std::path::Path;

use super::{AdamW, Result, TrainError};
use crate::model::checkpoint::{put_str, put_tensor, Reader};
use crate::model::{Model, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFAT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub config_toml: String,
    pub model: Model,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_stream.to_le_bytes());
        out.extend_from_slice(&(self.rng_word_pos as u64).to_le_bytes());
        out.extend_from_slice(&((self.rng_word_pos >> 64) as u64).to_le_bytes());
        put_str(&mut out, &self.config_toml);
        out.extend_from_slice(&self.model.to_bytes());
        out.extend_from_slice(&self.optimizer.t.to_le_bytes());
        out.extend_from_slice(&(self.optimizer.m.len() as u32).to_le_bytes());
        for t in self.optimizer.m.iter().chain(&self.optimizer.v) {
            put_tensor(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(
                ModelError::Checkpoint("bad magic, not a training checkpoint".into()).into(),
            );
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            ))
            .into());
        }
        let step = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng_stream = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        let config_toml = r.string()?;
        let (model, _) = Model::read(&mut r, None)?;
        let t = r.u64()?;
        let count = r.u32()? as usize;
        if count != model.params().len() {
            return Err(ModelError::Checkpoint(format!(
                "{count} optimizer moments for {} parameters",
                model.params().len()
            ))
            .into());
        }
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            m.push(r.tensor()?);
        }
        for _ in 0..count {
            v.push(r.tensor()?);
        }
        for ((mt, vt), p) in m.iter().zip(&v).zip(model.params().tensors()) {
            if mt.shape() != p.shape() || vt.shape() != p.shape() {
                return Err(ModelError::Checkpoint(
                    "optimizer moment shape differs from its parameter".into(),
                )
                .into());
            }
        }
        if r.position() != bytes.len() {
            return Err(ModelError::Checkpoint("trailing bytes after checkpoint".into()).into());
        }
        Ok(Self {
            step,
            rng_seed,
            rng_stream,
            rng_word_pos: lo | (hi << 64),
            config_toml,
            model,
            optimizer: AdamW { t, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_bytes())
            .map_err(|e| TrainError::Io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Io(path.to_path_buf(), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads either a model file or a training checkpoint and returns the model.
pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::Io(path.to_path_buf(), e))?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        Ok(Checkpoint::from_bytes(&bytes)?.model)
    } else {
        Ok(Model::from_bytes(&bytes, None)?)
    }
}
