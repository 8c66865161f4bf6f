//! Binary tensor files and directories of named tensors.
//!
//! A tensor file is the magic `PT3D`, a little-endian `u32` version, a `u32`
//! rank, `rank` little-endian `u64` dimensions and then the `f64` payload in
//! row-major order, also little-endian. A tensor directory holds one such file
//! per tensor plus `index.toml`, which lists names in order and may carry
//! free-form string metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use protoseg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"PT3D";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;
pub const INDEX_FILE: &str = "index.toml";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * (t.shape().len() + t.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if bytes.len() < n {
        return Err(format!("truncated: needed {n} more bytes, {} left", bytes.len()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn u32_at(bytes: &mut &[u8]) -> std::result::Result<u32, String> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().expect("4 bytes")))
}

pub fn decode(mut bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let b = &mut bytes;
    if take(b, 4)? != MAGIC {
        return Err("not a PT3D tensor (bad magic)".into());
    }
    let version = u32_at(b)?;
    if version != VERSION {
        return Err(format!("unsupported PT3D version {version}"));
    }
    let rank = u32_at(b)? as usize;
    if rank > MAX_RANK {
        return Err(format!("rank {rank} exceeds {MAX_RANK}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(b, 8)?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| format!("dimension {d} too large"))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("element count overflows")?;
    let payload = take(b, count.checked_mul(8).ok_or("payload size overflows")?)?;
    if !b.is_empty() {
        return Err(format!("{} trailing bytes after payload", b.len()));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(t))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map(BufReader::new)
        .and_then(|mut r| r.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|m| CliError::format(path, m))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorIndex {
    pub version: u32,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default, rename = "tensor")]
    pub tensors: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub name: String,
    pub file: String,
}

/// Ordered named tensors with string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorDir {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorDir {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut index = TensorIndex { version: VERSION, meta: self.meta.clone(), tensors: Vec::new() };
        let mut seen = std::collections::BTreeSet::new();
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            if !seen.insert(name.as_str()) {
                return Err(CliError::format(dir, format!("duplicate tensor name `{name}`")));
            }
            let file = format!("{i:04}.pt3d");
            write_tensor(&dir.join(&file), t)?;
            index.tensors.push(IndexEntry { name: name.clone(), file });
        }
        let text = toml::to_string(&index).map_err(|e| CliError::format(dir, e.to_string()))?;
        crate::io::write_text(&dir.join(INDEX_FILE), &text)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let index: TensorIndex = crate::io::read_toml(&path)?;
        if index.version != VERSION {
            return Err(CliError::format(&path, format!("unsupported index version {}", index.version)));
        }
        let mut tensors = Vec::with_capacity(index.tensors.len());
        for e in &index.tensors {
            if e.file.contains(['/', '\\']) || e.file.starts_with('.') {
                return Err(CliError::format(&path, format!("tensor file `{}` must be a plain file name", e.file)));
            }
            tensors.push((e.name.clone(), read_tensor(&dir.join(&e.file))?));
        }
        Ok(TensorDir { meta: index.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(2, 1, vec![1.5, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"PT3D");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &1u64.to_le_bytes());
        assert_eq!(&bytes[28..36], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 44);
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = encode(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).unwrap_err().contains("magic"));
        assert!(decode(&good[..good.len() - 1]).unwrap_err().contains("truncated"));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode(&trailing).unwrap_err().contains("trailing"));
        let mut version = good;
        version[4] = 9;
        assert!(decode(&version).unwrap_err().contains("version"));
    }
}
