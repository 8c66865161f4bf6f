//! Binary point-cloud block files.
//!
//! Layout: the magic `PB3D`, then little-endian `u32` version, point count
//! `N` and feature width (always 9), then `N × 9` `f64` features row by row
//! and finally `N` `u32` labels.

use std::fs;
use std::path::Path;

use protoseg_core::data::{Point, PointCloudBlock, FEATURE_DIM};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"PB3D";
pub const VERSION: u32 = 1;

pub fn encode(block: &PointCloudBlock) -> Result<Vec<u8>> {
    let n = block.len();
    let mut out = Vec::with_capacity(16 + n * (8 * FEATURE_DIM + 4));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    for p in &block.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &l in &block.labels {
        let l = u32::try_from(l).map_err(|_| CliError::invalid(format!("label {l} does not fit in u32")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<PointCloudBlock, String> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err("not a PB3D block (bad magic or short header)".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (version, n, width) = (word(4), word(8) as usize, word(12) as usize);
    if version != VERSION {
        return Err(format!("unsupported PB3D version {version}"));
    }
    if width != FEATURE_DIM {
        return Err(format!("feature width {width}, expected {FEATURE_DIM}"));
    }
    let expected = 16 + n * (8 * FEATURE_DIM + 4);
    if bytes.len() != expected {
        return Err(format!("{} bytes, expected {expected} for {n} points", bytes.len()));
    }
    let feats = &bytes[16..16 + n * 8 * FEATURE_DIM];
    let points: Vec<Point> = feats
        .chunks_exact(8 * FEATURE_DIM)
        .map(|row| core::array::from_fn(|j| f64::from_le_bytes(row[8 * j..8 * j + 8].try_into().expect("8 bytes"))))
        .collect();
    let labels = bytes[16 + n * 8 * FEATURE_DIM..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    PointCloudBlock::new(points, labels).map_err(|e| e.to_string())
}

pub fn write_block(path: &Path, block: &PointCloudBlock) -> Result<()> {
    fs::write(path, encode(block)?).map_err(|e| CliError::io(path, e))
}

pub fn read_block(path: &Path) -> Result<PointCloudBlock> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|m| CliError::format(path, m))
}
