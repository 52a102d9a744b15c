//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       4 bytes  "RHCK"
//! version     u32
//! config_len  u32, then config_len bytes of ModelConfig JSON
//! n_tensors   u32
//! per tensor: name_len u32, name (utf-8), ndim u32, dims u32 * ndim,
//!             data f32 * prod(dims)
//! checksum    32 bytes, SHA-256 of everything before it
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams, ParamLayout};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(params.len() * 4 + 4096);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(params.config())?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let specs = params.layout().specs();
    buf.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for spec in specs {
        buf.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(spec.name.as_bytes());
        buf.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &d in &spec.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in &params.as_slice()[spec.range.clone()] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint using the config embedded in the file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path)?;
    let parsed = parse(&bytes)?;
    let layout = ParamLayout::new(&parsed.config);
    check_shapes(&layout, &parsed.tensors)?;
    assemble(parsed)
}

/// Loads a checkpoint and verifies that every tensor has the shape implied
/// by `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<ModelParams<f32>> {
    expected.validate()?;
    let bytes = fs::read(path)?;
    let parsed = parse(&bytes)?;
    check_shapes(&ParamLayout::new(expected), &parsed.tensors)?;
    assemble(parsed)
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

struct Parsed {
    config: ModelConfig,
    tensors: Vec<RawTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    let version = r.u32("version")?;
    if magic != CHECKPOINT_MAGIC || version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: format!(
                "{}/v{}",
                String::from_utf8_lossy(CHECKPOINT_MAGIC),
                CHECKPOINT_VERSION
            ),
            found: format!("{}/v{}", String::from_utf8_lossy(magic), version),
        });
    }
    if bytes.len() < 32 {
        return Err(Error::Truncated("missing checksum".into()));
    }
    let body_len = bytes.len() - 32;
    let cfg_len = r.u32("config length")? as usize;
    let cfg_bytes = r.take(cfg_len, "config")?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)?;
    let n = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "tensor name")?).into_owned();
        let ndim = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(RawTensor { name, shape, data });
    }
    if r.pos != body_len {
        return Err(Error::Truncated(format!(
            "body ends at byte {} but checksum starts at {body_len}",
            r.pos
        )));
    }
    let digest = Sha256::digest(&bytes[..body_len]);
    if digest.as_slice() != &bytes[body_len..] {
        return Err(Error::Truncated("checksum mismatch".into()));
    }
    Ok(Parsed { config, tensors })
}

fn check_shapes(layout: &ParamLayout, tensors: &[RawTensor]) -> Result<()> {
    let specs = layout.specs();
    for (i, spec) in specs.iter().enumerate() {
        let Some(t) = tensors.get(i) else {
            return Err(Error::ShapeMismatch {
                tensor: spec.name.clone(),
                expected: spec.shape.clone(),
                found: Vec::new(),
            });
        };
        if t.name != spec.name || t.shape != spec.shape {
            return Err(Error::ShapeMismatch {
                tensor: spec.name.clone(),
                expected: spec.shape.clone(),
                found: t.shape.clone(),
            });
        }
    }
    if let Some(extra) = tensors.get(specs.len()) {
        return Err(Error::ShapeMismatch {
            tensor: extra.name.clone(),
            expected: Vec::new(),
            found: extra.shape.clone(),
        });
    }
    Ok(())
}

fn assemble(parsed: Parsed) -> Result<ModelParams<f32>> {
    let data: Vec<f32> = parsed.tensors.into_iter().flat_map(|t| t.data).collect();
    let params = ModelParams::from_parts(parsed.config, data)?;
    if !params.all_finite() {
        return Err(Error::InvalidConfig(
            "checkpoint contains non-finite values".into(),
        ));
    }
    Ok(params)
}
