//! Model checkpoints: `"FSVM"`, version, the five model dimensions (all u32
//! LE), then every parameter block in declaration order as f32 LE.

use std::path::Path;

use ssalign_core::model::{ModelDims, ModelParams};
use ssalign_core::Tensor2;

use crate::{format_err, push_f32s, push_u32, read_file, write_file, IoResult, Reader};

pub const MAGIC: &[u8; 4] = b"FSVM";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams, path: &Path) -> IoResult<Vec<u8>> {
    let dims = params.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [dims.snippet_len, dims.frame_dim, dims.hidden, dims.embed, dims.classes] {
        push_u32(&mut out, v, path)?;
    }
    for block in params.blocks() {
        push_f32s(&mut out, block.data());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> IoResult<ModelParams> {
    let mut r = Reader::new(path, bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let dims = ModelDims {
        snippet_len: r.u32()? as usize,
        frame_dim: r.u32()? as usize,
        hidden: r.u32()? as usize,
        embed: r.u32()? as usize,
        classes: r.u32()? as usize,
    };
    let mut blocks = Vec::new();
    for (rows, cols) in dims.block_shapes() {
        blocks.push(Tensor2::new(rows, cols, r.f32s(rows.saturating_mul(cols))?)?);
    }
    r.finish()?;
    ModelParams::from_blocks(dims, blocks).map_err(|e| format_err(path, e.to_string()))
}

/// Saves `params`; values are rounded to f32.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> IoResult<()> {
    write_file(path, &encode(params, path)?)
}

pub fn load_checkpoint(path: &Path) -> IoResult<ModelParams> {
    decode(&read_file(path)?, path)
}
