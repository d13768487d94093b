//! Little-endian binary encoding shared by the checkpoint, embedding and BM25
//! index files. Every file starts with a 4-byte magic and a `u32` version.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_header(magic: &[u8; 4], version: u32) -> Self {
        let mut w = ByteWriter::default();
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// `u32` byte length followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn save(self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }
}

/// Cursor over a file image; every failure reports the byte offset.
pub struct ByteReader<'a> {
    path: PathBuf,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(path: impl Into<PathBuf>, bytes: &'a [u8]) -> Self {
        ByteReader {
            path: path.into(),
            bytes,
            pos: 0,
        }
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    /// Checks magic and returns the version, which must be in `1..=max_version`.
    pub fn header(&mut self, magic: &[u8; 4], max_version: u32) -> Result<u32> {
        let got = self.take(4)?;
        if got != magic {
            self.pos -= 4;
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version == 0 || version > max_version {
            self.pos -= 4;
            return Err(self.error(format!("unsupported format version {version}")));
        }
        Ok(version)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!(
                "unexpected end of file: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            self.pos -= 4;
            return Err(self.error("non-finite float"));
        }
        Ok(v)
    }

    pub fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            self.pos -= 8;
            return Err(self.error("non-finite float"));
        }
        Ok(v)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let start = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| {
            self.pos = start;
            self.error("invalid UTF-8 string")
        })
    }

    /// Rejects a length field that could not possibly fit in the remaining bytes.
    pub fn check_count(&self, count: u64, min_bytes_each: u64) -> Result<usize> {
        let left = (self.bytes.len() - self.pos) as u64;
        match count.checked_mul(min_bytes_each) {
            Some(need) if need <= left => Ok(count as usize),
            _ => Err(self.error(format!("count {count} exceeds remaining {left} bytes"))),
        }
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// First four bytes of a file, for format sniffing.
pub fn peek_magic(path: impl AsRef<Path>) -> Result<[u8; 4]> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut m = [0u8; 4];
    f.read_exact(&mut m).map_err(|e| Error::io(path, e))?;
    Ok(m)
}
