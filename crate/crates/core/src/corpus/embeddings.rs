//! Binary embedding block: magic `CFDLG1\0`, little-endian `u32` row count
//! and dimension, then `count * dimension` little-endian `f32` values in row
//! order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 7] = b"CFDLG1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
}

pub fn write_embedding_block(path: &Path, block: &EmbeddingBlock) -> Result<()> {
    let mut buf = Vec::with_capacity(15 + 4 * block.dim * block.rows.len());
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(block.rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(block.dim as u32).to_le_bytes());
    for row in &block.rows {
        if row.len() != block.dim {
            return Err(Error::dim("embedding row", block.dim, row.len()));
        }
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_block(path: &Path) -> Result<EmbeddingBlock> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 15 || &bytes[..7] != EMBEDDING_MAGIC {
        return Err(bad("missing CFDLG1 magic".into()));
    }
    let count = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    let body = &bytes[15..];
    if body.len() != 4 * count * dim {
        return Err(bad(format!(
            "header declares {count} rows of dimension {dim} but the block holds {} values",
            body.len() / 4
        )));
    }
    let rows = if dim == 0 {
        vec![Vec::new(); count]
    } else {
        body.chunks_exact(4 * dim)
            .map(|r| {
                r.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            })
            .collect()
    };
    Ok(EmbeddingBlock { dim, rows })
}
