//! Little-endian binary helpers shared by the file formats.

use std::io::Read;

use crate::error::{Error, Result};

/// Reader that tracks its byte offset for error reporting.
pub(crate) struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn exact<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        offset: self.offset,
                        needed: buf.len(),
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }
}

pub(crate) fn read_magic<R: Read>(r: &mut ByteReader<R>, magic: &[u8; 4]) -> Result<()> {
    let offset = r.offset();
    let found = r.exact::<4>()?;
    if &found != magic {
        return Err(Error::BadMagic {
            offset,
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

pub(crate) fn read_u64<R: Read>(r: &mut ByteReader<R>) -> Result<u64> {
    Ok(u64::from_le_bytes(r.exact::<8>()?))
}

pub(crate) fn read_u8<R: Read>(r: &mut ByteReader<R>) -> Result<u8> {
    Ok(r.exact::<1>()?[0])
}

pub(crate) fn read_f32s<R: Read>(r: &mut ByteReader<R>, n: usize) -> Result<Vec<f64>> {
    let bytes = r.take(n * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn write_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}
