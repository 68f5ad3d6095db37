//! CMCK checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `b"CMCK"` |
//! | 2     | version, `u16` = 1 |
//! | 4     | config length `L`, `u32` |
//! | L     | model configuration, UTF-8 JSON |
//! | 4     | tensor count, `u32` |
//!
//! followed by, for each tensor in parameter-store order: `u16` name
//! length, name bytes, `u8` rank, `rank` × `u32` dims, `f32` values.
//!
//! Running batch-norm statistics are stored like any other tensor. Loading
//! rebuilds the model from the configuration and then requires every
//! stored tensor to match the rebuilt layout by position, name and shape.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DualBranchModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMCK";
pub const VERSION: u16 = 1;

pub fn encode_checkpoint(model: &DualBranchModel) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Format(format!("cannot serialize model config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(config.len()).expect("config fits u32").to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Sequential little-endian reader that reports short reads as corruption.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::Corruption {
                what: format!("checkpoint truncated in {what} (bytes)"),
                expected: n,
                actual: left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Rebuild a model from checkpoint bytes. Nothing is returned unless the
/// whole file parses and matches the configured layout.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<DualBranchModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a CMCK checkpoint (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::Format(format!("checkpoint config is not valid: {e}")))?;
    let mut model = DualBranchModel::new(config)?;

    let count = r.u32("tensor count")? as usize;
    if count != model.params.len() {
        return Err(Error::Corruption {
            what: format!("tensor count for preset {}", model.config.preset),
            expected: model.params.len(),
            actual: count,
        });
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name_len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "tensor name")?).into_owned();
        let expected_name = &model.params.param(id).name;
        if &name != expected_name {
            return Err(Error::Format(format!(
                "tensor {} is named {name:?}, expected {expected_name:?}",
                id.index()
            )));
        }
        let rank = r.u8("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let want = model.params.get(id).shape().to_vec();
        if shape != want {
            let (expected, actual) = if rank != want.len() {
                (want.len(), rank)
            } else {
                (want.iter().product(), shape.iter().product())
            };
            return Err(Error::Corruption {
                what: format!("shape of {name} ({shape:?} vs {want:?})"),
                expected,
                actual,
            });
        }
        let n: usize = shape.iter().product();
        let values = r
            .take(4 * n, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.params.get_mut(id) = Tensor::new(&shape, values)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption {
            what: "checkpoint length (bytes)".into(),
            expected: r.pos,
            actual: bytes.len(),
        });
    }
    Ok(model)
}

pub fn save_checkpoint(model: &DualBranchModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DualBranchModel> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
