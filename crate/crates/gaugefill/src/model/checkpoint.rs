//! Binary checkpoint format: every learnable tensor by name, the model
//! config, the relative-position standardization statistics (so inference is
//! self-contained), and an arbitrary metadata JSON block for run provenance.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "GFCKPT01"
//! version: u32
//! header_len: u32, header: JSON { model config, metadata }
//! stats: 4 x f64 (distance mean/std, azimuth mean/std)
//! param_count: u32
//! per tensor: name_len u16 | name utf-8 | ndim u8 | dims u32 x ndim | data f64 x numel
//! checksum: u64 (first 8 bytes of SHA-256 over everything above)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::geo::{RelPosStats, Stats};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GFCKPT01";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

pub struct Checkpoint {
    pub params: ModelParams,
    pub stats: RelPosStats,
    pub meta: serde_json::Value,
}

pub fn save(
    path: &Path,
    params: &ModelParams,
    stats: &RelPosStats,
    meta: &serde_json::Value,
) -> Result<()> {
    let bytes = encode(params, stats, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

pub fn encode(
    params: &ModelParams,
    stats: &RelPosStats,
    meta: &serde_json::Value,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let header = Header {
        model: *params.config(),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);

    for v in [
        stats.dist.mean,
        stats.dist.std,
        stats.azim.mean,
        stats.azim.std,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }

    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, tensor) in params.names().iter().zip(params.tensors()) {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }

    out.extend_from_slice(&checksum(&out).to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };

    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Checkpoint("file too short".to_string()));
    }
    let body_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
    if checksum(&bytes[..body_len]) != stored {
        return Err(Error::Checkpoint(
            "checksum mismatch (truncated or corrupted file)".to_string(),
        ));
    }

    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }

    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;

    let stats = RelPosStats {
        dist: Stats {
            mean: r.f64()?,
            std: r.f64()?,
        },
        azim: Stats {
            mean: r.f64()?,
            std: r.f64()?,
        },
    };

    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".to_string()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(r.u64()?));
        }
        named.push((name, Tensor::new(shape, data)?));
    }

    let params = ModelParams::from_named_tensors(&header.model, named)?;
    Ok(Checkpoint {
        params,
        stats,
        meta: header.meta,
    })
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}
