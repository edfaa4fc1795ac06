//! Little-endian helpers shared by the binary file formats.

use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) struct Decoder<R> {
    inner: R,
    format: &'static str,
}

impl<R: Read> Decoder<R> {
    pub(crate) fn new(inner: R, format: &'static str) -> Self {
        Self { inner, format }
    }

    fn map(&self, err: io::Error) -> Error {
        if err.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated(self.format)
        } else {
            Error::io(self.format, err)
        }
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut found = [0u8; 4];
        self.inner.read_exact(&mut found).map_err(|e| self.map(e))?;
        if &found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, supported: u32) -> Result<()> {
        let version = self.u32()?;
        if version != supported {
            return Err(Error::UnsupportedVersion {
                format: self.format,
                version,
            });
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        self.inner
            .read_u16::<LittleEndian>()
            .map_err(|e| self.map(e))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.inner
            .read_u32::<LittleEndian>()
            .map_err(|e| self.map(e))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        self.inner
            .read_f32::<LittleEndian>()
            .map_err(|e| self.map(e))
    }

    /// Reads `n` f32 values widened to f64.
    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0f32; n];
        self.inner
            .read_f32_into::<LittleEndian>(&mut buf)
            .map_err(|e| self.map(e))?;
        Ok(buf.into_iter().map(f64::from).collect())
    }

    pub(crate) fn short_string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let mut bytes = vec![0u8; len];
        self.inner.read_exact(&mut bytes).map_err(|e| self.map(e))?;
        String::from_utf8(bytes)
            .map_err(|_| Error::Validation(format!("{} string is not UTF-8", self.format)))
    }

    /// Fails unless the whole input was consumed.
    pub(crate) fn finish(mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.inner.read(&mut rest) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Validation(format!(
                "trailing bytes after {} payload",
                self.format
            ))),
            Err(e) => Err(self.map(e)),
        }
    }
}

pub(crate) struct Encoder<W> {
    inner: W,
}

impl<W: Write> Encoder<W> {
    pub(crate) fn new(inner: W) -> Self {
        Self { inner }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.inner.write_all(b)
    }

    pub(crate) fn u16(&mut self, v: u16) -> io::Result<()> {
        self.inner.write_u16::<LittleEndian>(v)
    }

    pub(crate) fn u32(&mut self, v: u32) -> io::Result<()> {
        self.inner.write_u32::<LittleEndian>(v)
    }

    pub(crate) fn f32(&mut self, v: f32) -> io::Result<()> {
        self.inner.write_f32::<LittleEndian>(v)
    }

    pub(crate) fn f32_slice(&mut self, values: &[f64]) -> io::Result<()> {
        for &v in values {
            self.f32(v as f32)?;
        }
        Ok(())
    }

    pub(crate) fn short_string(&mut self, s: &str) -> io::Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "string longer than 65535 bytes"))?;
        self.u16(len)?;
        self.inner.write_all(s.as_bytes())
    }

    pub(crate) fn into_inner(self) -> W {
        self.inner
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rounds to the nearest value representable in the on-disk f32 encoding.
pub(crate) fn f32_round(v: f64) -> f64 {
    f64::from(v as f32)
}
