//! Checkpoint tensor blobs.
//!
//! Layout: magic `SGT1`, tensor count (u64 LE), then per tensor the name
//! length (u64 LE) and UTF-8 name, the rank (u64 LE), each dimension
//! (u64 LE) and finally the values as f32 LE.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_f32s, read_magic, read_u64, ByteReader};

pub const MAGIC: &[u8; 4] = b"SGT1";

pub fn write_blob<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_blob<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    let mut r = ByteReader::new(r);
    read_magic(&mut r, MAGIC)?;
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)? as usize;
        let bytes = r.take(len)?;
        let name = String::from_utf8(bytes).map_err(|e| Error::Parse {
            location: format!("offset {}", r.offset()),
            message: format!("tensor name is not UTF-8: {e}"),
        })?;
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n = shape.iter().product();
        let data = read_f32s(&mut r, n)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_blob(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_blob(&mut buf, tensors)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_blob(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_blob(std::io::BufReader::new(f))
}
