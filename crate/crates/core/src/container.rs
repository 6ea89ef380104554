//! Binary container shared by dataset files and generated-sample dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON, which must contain "payload_bytes"
//! payload    payload_bytes bytes
//! ```
//!
//! Readers check magic, version and the exact file length, so a truncated or
//! padded file is always rejected rather than partially read.

use serde_json::Value;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a {expected} file")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("header json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn write(
    path: &Path,
    magic: &[u8; 8],
    version: u32,
    mut header: Value,
    blocks: &[Vec<u8>],
) -> Result<(), ContainerError> {
    let payload_bytes: usize = blocks.iter().map(Vec::len).sum();
    header["payload_bytes"] = Value::from(payload_bytes as u64);
    let header = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("partial");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(magic)?;
        f.write_all(&version.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        for b in blocks {
            f.write_all(b)?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Returns the JSON header and the payload bytes.
pub fn read(
    path: &Path,
    magic: &[u8; 8],
    kind: &'static str,
    version: u32,
) -> Result<(Value, Vec<u8>), ContainerError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 {
        return Err(ContainerError::Corrupt("file shorter than preamble".into()));
    }
    if &bytes[..8] != magic {
        return Err(ContainerError::BadMagic { expected: kind });
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != version {
        return Err(ContainerError::Version {
            expected: version,
            found,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ContainerError::Corrupt("truncated header".into()))?;
    let header: Value = serde_json::from_slice(&bytes[20..header_end])?;
    let payload_bytes = header["payload_bytes"]
        .as_u64()
        .ok_or_else(|| ContainerError::Corrupt("header lacks payload_bytes".into()))?
        as usize;
    let payload = &bytes[header_end..];
    if payload.len() != payload_bytes {
        return Err(ContainerError::Corrupt(format!(
            "payload is {} bytes, header declares {payload_bytes}",
            payload.len()
        )));
    }
    Ok((header, payload.to_vec()))
}

pub fn f32_block(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect()
}

pub fn u32_block(values: impl IntoIterator<Item = u32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Sequential reader over a payload.
pub struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ContainerError::Corrupt("payload shorter than declared blocks".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>, ContainerError> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>, ContainerError> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<(), ContainerError> {
        if self.pos != self.bytes.len() {
            return Err(ContainerError::Corrupt("trailing bytes after blocks".into()));
        }
        Ok(())
    }
}
