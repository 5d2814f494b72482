//! Binary blob and JSON manifest helpers shared by all on-disk archives.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, RomError};

pub const FORMAT_VERSION: &str = "1";

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RomError::io(dir, e))
}

/// Four magic bytes followed by little-endian f64 values.
pub fn write_blob(path: &Path, magic: &[u8; 4], data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 8 * data.len());
    buf.extend_from_slice(magic);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| RomError::io(path, e))
}

pub fn read_blob(path: &Path, magic: &[u8; 4]) -> Result<Vec<f64>> {
    let buf = fs::read(path).map_err(|e| RomError::io(path, e))?;
    if buf.len() < 4 || &buf[..4] != magic {
        return Err(RomError::format(path, format!("bad magic bytes, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let body = &buf[4..];
    if body.len() % 8 != 0 {
        return Err(RomError::format(path, "payload is not a whole number of f64 values"));
    }
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| RomError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| RomError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| RomError::format(path, e.to_string()))
}

pub fn check_version(path: &Path, version: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(RomError::format(path, format!("unsupported format version {version}")));
    }
    Ok(())
}

/// SHA-256 over the relative paths and contents of every file below `dir`,
/// visited in sorted order.
pub fn dir_checksum(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let p = dir.join(&rel);
        let bytes = fs::read(&p).map_err(|e| RomError::io(&p, e))?;
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| RomError::io(dir, e))? {
        let entry = entry.map_err(|e| RomError::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// SHA-256 of a slice of f64 values (bit patterns).
pub fn f64_checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
