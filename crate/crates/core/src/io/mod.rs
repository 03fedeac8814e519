//! Binary dataset and checkpoint files, and PGM/PPM image dumps.
//!
//! Dataset and checkpoint files share one framing:
//!
//! ```text
//! magic        8 bytes
//! version      u32 LE
//! payload_len  u64 LE
//! payload      payload_len bytes
//! crc32        u32 LE, IEEE CRC-32 of the payload
//! ```

mod checkpoint;
mod dataset;
mod pnm;

use std::path::Path;

pub use checkpoint::{
    load_checkpoint, load_classifier, load_denoiser, save_checkpoint, save_classifier, save_denoiser, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dataset::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use pnm::{dump_grid, dump_image, encode_pnm, pixel_byte};

use crate::error::{Error, Result};

const HEADER_LEN: usize = 8 + 4 + 8;

pub(crate) fn write_framed(path: &Path, magic: &[u8; 8], version: u32, payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Validates framing and returns the payload. Nothing is returned unless the checksum matches.
pub(crate) fn read_framed(path: &Path, magic: &[u8; 8], version: u32) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    let truncated = || Error::Truncated { path: path.to_path_buf() };
    if bytes.len() < 8 {
        return Err(truncated());
    }
    if &bytes[..8] != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated());
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found,
            expected: version,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = (HEADER_LEN as u64).checked_add(len).and_then(|e| e.checked_add(4)).ok_or_else(truncated)?;
    if (bytes.len() as u64) < end {
        return Err(truncated());
    }
    if (bytes.len() as u64) > end {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() as u64 - end),
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len as usize];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    Ok(payload.to_vec())
}

/// Little-endian payload writer.
#[derive(Default)]
pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
}

/// Little-endian payload reader; running out of bytes is a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    pub(crate) fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("payload ends early at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub(crate) fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("invalid UTF-8"))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} unread payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}
