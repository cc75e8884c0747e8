//! Little-endian binary reading and writing with offset-aware errors.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: String,
        found: String,
    },
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated input at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: usize },
    #[error("invalid {}at offset {offset}: {reason}", record.map(|r| format!("record {r} ")).unwrap_or_default())]
    Invalid {
        record: Option<usize>,
        offset: u64,
        reason: String,
    },
    #[error("checksum mismatch at offset {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { offset: u64, stored: u32, computed: u32 },
    #[error("{count} unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: u64, count: usize },
}

/// Cursor over a byte buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Record index attached to `Invalid` errors.
    pub record: Option<usize>,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self {
            buf,
            pos: 0,
            record: None,
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(FormatError::Truncated {
                offset: self.offset(),
                needed: n - remaining,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8]) -> Result<(), FormatError> {
        let offset = self.offset();
        let found = self.bytes(expected.len()).map_err(|_| FormatError::BadMagic {
            offset,
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&self.buf[self.pos..]).into_owned(),
        })?;
        if found != expected {
            return Err(FormatError::BadMagic {
                offset,
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let len = n.checked_mul(8).ok_or_else(|| self.invalid("array length overflows"))?;
        let raw = self.bytes(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// A length prefix, rejected if the remaining input cannot hold
    /// `len × elem_size` bytes.
    pub fn len_prefix(&mut self, elem_size: usize) -> Result<usize, FormatError> {
        let offset = self.offset();
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem_size as u64) > remaining {
            return Err(FormatError::Truncated {
                offset,
                needed: (n.saturating_mul(elem_size as u64) - remaining) as usize,
            });
        }
        Ok(n as usize)
    }

    pub fn invalid(&self, reason: impl Into<String>) -> FormatError {
        FormatError::Invalid {
            record: self.record,
            offset: self.offset(),
            reason: reason.into(),
        }
    }

    /// Verifies the CRC-32 trailer over everything read so far and checks
    /// that nothing follows it.
    pub fn finish(&mut self) -> Result<(), FormatError> {
        let body = self.pos;
        let offset = self.offset();
        let stored = self.u32()?;
        let computed = crc32fast::hash(&self.buf[..body]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { offset, stored, computed });
        }
        let count = self.buf.len() - self.pos;
        if count != 0 {
            return Err(FormatError::TrailingBytes {
                offset: self.offset(),
                count,
            });
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.f64(*v);
        }
    }

    /// Appends the CRC-32 of the buffer and returns it.
    pub fn into_checked(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
