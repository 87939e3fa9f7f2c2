//! Little-endian framing shared by the store and checkpoint files:
//! 4-byte magic, u16 version, payload, then an XXH3-64 checksum of every
//! preceding byte.

use std::path::{Path, PathBuf};

use xxhash_rust::xxh3::xxh3_64;

use crate::error::{Error, Result};

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut buf = Vec::with_capacity(4096);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Encoder { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, values: &[f64]) {
        for &v in values {
            self.f64(v);
        }
    }

    /// Appends the checksum and writes the file.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        let sum = xxh3_64(&self.buf);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        std::fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Decoder {
    path: PathBuf,
    buf: Vec<u8>,
    pos: usize,
    end: usize,
}

impl Decoder {
    /// Reads `path`, checks magic, version and checksum, and positions the
    /// cursor at the start of the payload.
    pub fn open(path: &Path, magic: &[u8; 4], kind: &'static str, version: u16) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: kind,
            });
        }
        if buf.len() < 6 + 8 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                detail: "file too short".into(),
            });
        }
        let found = u16::from_le_bytes([buf[4], buf[5]]);
        if found != version {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found,
                expected: version,
            });
        }
        let end = buf.len() - 8;
        let stored = u64::from_le_bytes(buf[end..].try_into().unwrap());
        if xxh3_64(&buf[..end]) != stored {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
            });
        }
        Ok(Decoder {
            path: path.to_path_buf(),
            buf,
            pos: 6,
            end,
        })
    }

    pub fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.pos + N > self.end {
            return Err(self.corrupt(format!("unexpected end of data at byte {}", self.pos)));
        }
        let bytes = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        Ok(bytes)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        self.take().map(u16::from_le_bytes)
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.take().map(u32::from_le_bytes)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.take().map(u64::from_le_bytes)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.take().map(f64::from_le_bytes)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|bytes| self.pos + bytes > self.end) {
            return Err(self.corrupt(format!("expected {n} floats at byte {}", self.pos)));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.end {
            return Err(self.corrupt(format!("{} trailing bytes", self.end - self.pos)));
        }
        Ok(())
    }
}
