//! Per-video feature files: `"FSVD"`, version, `n`, `D`, label (all u32 LE),
//! then `n·D` f32 LE values in row-major order.

use std::path::Path;

use ssalign_core::data::FrameFeatureVideo;
use ssalign_core::Tensor2;

use crate::{format_err, push_f32s, push_u32, read_file, write_file, IoResult, Reader};

pub const MAGIC: &[u8; 4] = b"FSVD";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 20;

/// Header and frames of one feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub label: usize,
    pub frames: Tensor2,
}

pub fn encode(label: usize, frames: &Tensor2, path: &Path) -> IoResult<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * frames.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_u32(&mut out, frames.rows(), path)?;
    push_u32(&mut out, frames.cols(), path)?;
    push_u32(&mut out, label, path)?;
    push_f32s(&mut out, frames.data());
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> IoResult<FeatureFile> {
    let mut r = Reader::new(path, bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let label = r.u32()? as usize;
    let data = r.f32s(n.saturating_mul(d))?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(format_err(path, "non-finite feature value"));
    }
    Ok(FeatureFile {
        label,
        frames: Tensor2::new(n, d, data)?,
    })
}

/// Writes `video` in the feature format. Values are stored as f32.
pub fn write_video_features(video: &FrameFeatureVideo, path: &Path) -> IoResult<()> {
    write_file(path, &encode(video.label, &video.frames, path)?)
}

pub fn read_video_features(path: &Path) -> IoResult<FeatureFile> {
    decode(&read_file(path)?, path)
}
