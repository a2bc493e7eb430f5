//! Binary checkpoint format.
//!
//! ```text
//! "FUXICKPT" | u32 version | u64 manifest length | manifest (TOML)
//! u32 array count | per array: u32 name length, name, u32 rank, u64 dims.., f64 data..
//! SHA-256 of everything above
//! ```
//!
//! Integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{FuxiError, Result};
use crate::model::{param_shapes, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FUXICKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
}

pub fn encode(config: &ModelConfig, params: &ModelParams<Tensor>) -> Result<Vec<u8>> {
    let manifest = toml::to_string(&Manifest {
        format_version: VERSION,
        model: config.clone(),
    })
    .map_err(|e| FuxiError::Checkpoint(format!("cannot serialize manifest: {e}")))?;
    let mut out = Vec::with_capacity(64 + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    let names = params.names();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    params.for_each(|name, t| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| FuxiError::Checkpoint("truncated file".into()))?;
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
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<Tensor>)> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FuxiError::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(FuxiError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(FuxiError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| FuxiError::Checkpoint("manifest is not UTF-8".into()))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| FuxiError::Checkpoint(format!("bad manifest: {e}")))?;
    let config = manifest.model;
    config.validate()?;

    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| FuxiError::Checkpoint("array name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| FuxiError::Checkpoint("array too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(FuxiError::Checkpoint("trailing bytes after arrays".into()));
    }

    let expected = param_shapes(&config);
    let mut iter = arrays.into_iter();
    let params = expected.try_map(|name, shape| {
        let (got, t) = iter.next().ok_or_else(|| FuxiError::Checkpoint(format!("missing array {name}")))?;
        if got != name || t.shape() != &shape[..] {
            return Err(FuxiError::Checkpoint(format!("expected {name} {shape:?}, found {got} {:?}", t.shape())));
        }
        Ok(t.with_grad())
    })?;
    if let Some((name, _)) = iter.next() {
        return Err(FuxiError::Checkpoint(format!("unexpected array {name}")));
    }
    Ok((config, params))
}

pub fn save(path: &Path, config: &ModelConfig, params: &ModelParams<Tensor>) -> Result<()> {
    let bytes = encode(config, params)?;
    std::fs::write(path, bytes).map_err(|e| FuxiError::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams<Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| FuxiError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> (ModelConfig, ModelParams<Tensor>) {
        let cfg = ModelConfig {
            dim: 3,
            head_dim: 2,
            ffn_dim: 4,
            max_len: 5,
            time_buckets: 4,
            vocab: 9,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
        (cfg, params)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (cfg, params) = sample();
        let bytes = encode(&cfg, &params).unwrap();
        let (cfg2, params2) = decode(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);
        assert_eq!(encode(&cfg2, &params2).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (cfg, params) = sample();
        let mut bytes = encode(&cfg, &params).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(FuxiError::Checkpoint(m)) if m.contains("checksum")));
        assert!(decode(b"garbage").is_err());
    }
}
