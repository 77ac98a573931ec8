//! File formats and the command-line driver for `ssalign-core`.
//!
//! Per-video feature files (`.fsvd`), dataset manifests (JSON), model
//! checkpoints (`.fsvm`) and metrics records (JSON) live here, together with
//! the `generate`, `train`, `eval` and `ablate` commands.

pub mod checkpoint;
pub mod cli;
pub mod features;
pub mod manifest;
pub mod metrics;

use std::path::{Path, PathBuf};

/// Errors raised while reading or writing files.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("video '{id}': {msg}")]
    Video { id: String, msg: String },
    #[error(transparent)]
    Core(#[from] ssalign_core::Error),
}

pub type IoResult<T> = Result<T, IoError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Little-endian reader over a byte buffer that reports truncation as a
/// format error.
pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> IoResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(format_err(
                self.path,
                format!("truncated at byte {} (needed {n} more)", self.pos),
            )),
        }
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> IoResult<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(format_err(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> IoResult<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, count: usize) -> IoResult<Vec<f64>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| format_err(self.path, "payload size overflows"))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub(crate) fn finish(&self) -> IoResult<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn push_u32(out: &mut Vec<u8>, v: usize, path: &Path) -> IoResult<()> {
    let v = u32::try_from(v).map_err(|_| format_err(path, format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn read_file(path: &Path) -> IoResult<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> IoResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}
