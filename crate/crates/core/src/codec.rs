//! Little-endian binary helpers shared by the model, distribution and image
//! archive file formats.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub(crate) struct Reader<R> {
    inner: R,
    offset: u64,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R, what: &'static str) -> Self {
        Self {
            inner,
            offset: 0,
            what,
        }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::Persist(format!(
                    "{}: truncated at byte {} (wanted {} more bytes)",
                    self.what,
                    self.offset,
                    buf.len()
                ))
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let mut buf = vec![0u8; expected.len()];
        self.fill(&mut buf)?;
        if buf != expected {
            return Err(Error::Persist(format!(
                "{}: bad magic header {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(&buf),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Reads a length field and rejects values that cannot be a real size.
    pub(crate) fn len(&mut self, field: &str, max: u64) -> Result<usize> {
        let v = self.u64()?;
        if v > max {
            return Err(Error::Persist(format!(
                "{}: field `{field}` = {v} exceeds limit {max}",
                self.what
            )));
        }
        Ok(v as usize)
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        self.fill(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Persist(format!(
                "{}: trailing bytes after offset {}",
                self.what, self.offset
            ))),
        }
    }
}

pub(crate) fn put_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f64s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f64>) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}
