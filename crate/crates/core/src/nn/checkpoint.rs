//! Versioned checkpoint container.
//!
//! Layout (little-endian): magic `CUBECKPT`, `u32` version, `u32` length +
//! architecture name, `u32` length + model config JSON, `u64` parameter
//! count, the `f64` parameters, then a SHA-256 over everything before it.

use std::fs;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::registry::ModelConfig;
use super::{Model, NnError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CUBECKPT";

pub fn write_checkpoint(model: &Model, config: &ModelConfig) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 8 * model.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let name = config.arch.name().as_bytes();
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    let cfg = serde_json::to_vec(config).expect("model config serializes");
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Parses a checkpoint, verifying the content hash, and rebuilds the model.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(Model, ModelConfig), NnError> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("content hash mismatch"));
    }
    let mut r = &body[8..];
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let name_len = read_u32(&mut r)? as usize;
    let name = take(&mut r, name_len)?;
    let cfg_len = read_u32(&mut r)? as usize;
    let cfg_bytes = take(&mut r, cfg_len)?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if config.arch.name().as_bytes() != name {
        return Err(bad("architecture name disagrees with config"));
    }
    let count = read_u64(&mut r)? as usize;
    let raw = take(&mut r, count.checked_mul(8).ok_or_else(|| bad("parameter count overflow"))?)?;
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let mut model = config.build()?;
    model.set_params(&params)?;
    Ok((model, config))
}

pub fn save_checkpoint(path: &Path, model: &Model, config: &ModelConfig) -> Result<(), NnError> {
    fs::write(path, write_checkpoint(model, config))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, ModelConfig), NnError> {
    read_checkpoint(&fs::read(path)?)
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], NnError> {
    if r.len() < n {
        return Err(NnError::Checkpoint("truncated".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| NnError::Checkpoint("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| NnError::Checkpoint("truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    #[test]
    fn round_trip_and_tamper_detection() {
        let cfg = ModelConfig::new(Architecture::BaselineMini, 16, 42);
        let model = cfg.build().unwrap();
        let bytes = write_checkpoint(&model, &cfg);
        let (back, back_cfg) = read_checkpoint(&bytes).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(back.params(), model.params());

        let mut tampered = bytes.clone();
        let mid = tampered.len() / 2;
        tampered[mid] ^= 1;
        assert!(matches!(read_checkpoint(&tampered), Err(NnError::Checkpoint(m)) if m.contains("hash")));
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_checkpoint(b"nope").is_err());
    }
}
