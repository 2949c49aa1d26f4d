//! Little-endian binary helpers for the on-disk formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Appends values as IEEE-754 binary32 little-endian.
pub fn push_f32_le(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn read_f32_le(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn push_u16_le(out: &mut Vec<u8>, values: &[usize]) -> Result<()> {
    for &v in values {
        let v = u16::try_from(v).map_err(|_| Error::Label {
            index: v,
            classes: u16::MAX as usize + 1,
        })?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn read_u16_le(bytes: &[u8]) -> Vec<usize> {
    bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect()
}

/// Rounds through binary32, the precision of every file format.
pub fn truncate_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline. Field order follows the struct.
pub fn to_json_bytes<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Data(format!("serializing JSON: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, e.to_string()))
}
