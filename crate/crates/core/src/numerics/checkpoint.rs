//! Model checkpoint file: the magic `CFNET1\0`, a little-endian `u32`
//! header length, a UTF-8 JSON header describing the architecture, then the
//! parameter block as little-endian IEEE-754 `f32` values. The header's
//! `param_count` field gives the number of values in the block.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"CFNET1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub params: Vec<f64>,
}

pub fn write_checkpoint(path: &Path, header: &Value, params: &[f64]) -> Result<()> {
    let mut header = header.clone();
    match header.as_object_mut() {
        Some(obj) => {
            obj.insert("param_count".into(), Value::from(params.len()));
        }
        None => return Err(Error::Format("checkpoint header must be a JSON object".into())),
    }
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + json.len() + 4 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for &p in params {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..7] != CHECKPOINT_MAGIC {
        return Err(bad("missing CFNET1 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let body = bytes.get(11..11 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Value = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let count = header
        .get("param_count")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("header lacks param_count"))? as usize;
    let block = &bytes[11 + hlen..];
    if block.len() != 4 * count {
        return Err(bad(&format!(
            "parameter block holds {} bytes, header promises {count} values",
            block.len()
        )));
    }
    let params = block
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Checkpoint { header, params })
}
