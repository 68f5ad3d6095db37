//! CMF1 feature files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `b"CMF1"` |
//! | 2     | version, `u16` = 1 |
//! | 1     | modality, `u8` (0 audio, 1 video) |
//! | 4     | `T`, `u32` |
//! | 4     | `D`, `u32` |
//! | 4·T·D | `f32` values, row-major |
//!
//! The clip id is not stored; readers take it from the file stem.

use std::fs;
use std::path::Path;

use super::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMF1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 15;

pub fn encode(seq: &FeatureSequence) -> Vec<u8> {
    let (t, d) = (seq.len(), seq.dim());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(seq.modality.code());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in seq.values().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], clip_id: &str) -> Result<FeatureSequence> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "{clip_id}: not a CMF1 feature file (bad magic)"
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption {
            what: format!("{clip_id}: header bytes"),
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!(
            "{clip_id}: unsupported CMF version {version}, expected {VERSION}"
        )));
    }
    let modality = Modality::from_code(bytes[6]).ok_or_else(|| {
        Error::Format(format!("{clip_id}: unknown modality code {}", bytes[6]))
    })?;
    let t = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    if t == 0 || d == 0 {
        return Err(Error::Format(format!(
            "{clip_id}: empty feature shape ({t}, {d})"
        )));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("{clip_id}: shape ({t}, {d}) overflows")))?;
    if payload.len() != expected {
        return Err(Error::Corruption {
            what: format!("{clip_id}: payload bytes for ({t}, {d}) f32 values"),
            expected,
            actual: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureSequence::new(clip_id, modality, Tensor::new(&[t, d], values)?)
}

pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(seq)).map_err(|e| Error::io(path, e))
}

/// Read a feature file; the clip id is the file stem.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let clip_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode(&bytes, &clip_id)
}
