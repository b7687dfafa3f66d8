//! Binary model file.
//!
//! All integers little-endian:
//!
//! ```text
//! magic            4 bytes  "MFAW"
//! version          u32      2
//! config           11 × u32 (vocab_size, d_model, d_state, d_expand, n_heads, n_blocks,
//!                            n_mamba_per_block, down_kernel, down_stride, conv_kernel,
//!                            diffusion_steps)
//!                  u8       block order (0 MFA, 1 AFM, 2 FMA, 3 MFA-2SA)
//!                  i64      pad token (−1 when absent)
//!                  u8       positional signal (0 none, 1 sinusoidal)
//! tensor count     u32
//! per tensor       u32 name length, UTF-8 name, u32 rank, rank × u32 dims, numel × f64
//! ```

use std::path::Path;

use super::{MfaConfig, Model, ModelError, ParamStore, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MFAW";
pub const VERSION: u32 = 2;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| ModelError::Checkpoint("tensor too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_params(out: &mut Vec<u8>, params: &ParamStore) {
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        put_str(out, name);
        put_tensor(out, t);
    }
}

pub(crate) fn read_params(r: &mut Reader<'_>) -> Result<ParamStore> {
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let t = r.tensor()?;
        store.insert(name, t);
    }
    Ok(store)
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.num_params() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        self.config.encode_into(&mut out);
        put_params(&mut out, &self.params);
        out
    }

    /// Decodes a model file. With `expected`, a differing stored config is an error.
    pub fn from_bytes(bytes: &[u8], expected: Option<&MfaConfig>) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let (model, _) = Self::read(&mut r, expected)?;
        if r.position() != bytes.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} trailing bytes after model",
                bytes.len() - r.position()
            )));
        }
        Ok(model)
    }

    pub(crate) fn read(r: &mut Reader<'_>, expected: Option<&MfaConfig>) -> Result<(Self, usize)> {
        let start = r.position();
        if r.take(4)? != MAGIC {
            return Err(ModelError::Checkpoint("bad magic, not a model file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let config = MfaConfig::decode_from(r)?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(ModelError::Checkpoint(format!(
                    "config mismatch: file has {config:?}, expected {exp:?}"
                )));
            }
        }
        let params = read_params(r)?;
        let model = Model::from_parts(config, params)?;
        Ok((model, r.position() - start))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::util::write_atomic(path.as_ref(), &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&MfaConfig>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockOrder;

    fn cfg() -> MfaConfig {
        MfaConfig {
            d_model: 8,
            d_state: 2,
            d_expand: 16,
            n_heads: 2,
            n_blocks: 1,
            ..MfaConfig::desk(10, 4)
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = Model::new(cfg().with_order(BlockOrder::Fma), 3).unwrap();
        let back = Model::from_bytes(&m.to_bytes(), Some(m.config())).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn config_mismatch_fails_loudly() {
        let m = Model::new(cfg(), 3).unwrap();
        let mut other = cfg();
        other.d_state = 4;
        let err = Model::from_bytes(&m.to_bytes(), Some(&other)).unwrap_err();
        assert!(err.to_string().contains("config mismatch"), "{err}");
    }

    #[test]
    fn truncation_and_magic_are_detected() {
        let m = Model::new(cfg(), 3).unwrap();
        let bytes = m.to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3], None).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad, None).is_err());
    }
}
