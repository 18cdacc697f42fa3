//! Embedding (`SGE1`) and codebook (`SGC1`) files.
//!
//! Embeddings: magic, modality byte (0 text, 1 vision), row count and dim
//! (u64 LE), then row-major f32 LE values. Row `i` belongs to the item on
//! line `i` of the sidecar `<path>.ids`.
//!
//! Codebooks: magic, modality byte, then D, K, d (u64 LE) and the codewords
//! level-major as f32 LE.

use std::io::Read;
use std::path::{Path, PathBuf};

use super::quantize::CodebookStack;
use crate::error::{Error, Result};
use crate::io::{read_f32s, read_magic, read_u64, read_u8, write_f32s, ByteReader};
use crate::modality::Modality;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SGE1";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"SGC1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub modality: Modality,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

fn modality_byte<R: Read>(r: &mut ByteReader<R>) -> Result<Modality> {
    let offset = r.offset();
    let b = read_u8(r)?;
    Modality::from_byte(b).ok_or_else(|| Error::Parse {
        location: format!("offset {offset}"),
        message: format!("modality byte {b} is neither 0 nor 1"),
    })
}

pub fn encode_embeddings(modality: Modality, rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Contract("embedding rows have different lengths".into()));
    }
    let mut out = Vec::with_capacity(21 + rows.len() * dim * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.push(modality.byte());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for r in rows {
        write_f32s(&mut out, r);
    }
    Ok(out)
}

pub fn decode_embeddings<R: Read>(r: R) -> Result<(Modality, Vec<Vec<f64>>)> {
    let mut r = ByteReader::new(r);
    read_magic(&mut r, EMBEDDING_MAGIC)?;
    let modality = modality_byte(&mut r)?;
    let n = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        rows.push(read_f32s(&mut r, dim)?);
    }
    Ok((modality, rows))
}

pub fn save_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    if table.ids.len() != table.rows.len() {
        return Err(Error::Contract(format!(
            "{} ids for {} embedding rows",
            table.ids.len(),
            table.rows.len()
        )));
    }
    let bytes = encode_embeddings(table.modality, &table.rows)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut text = table.ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (modality, rows) = decode_embeddings(std::io::BufReader::new(f))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let ids: Vec<String> = text.lines().map(str::to_string).collect();
    if ids.len() != rows.len() {
        return Err(Error::Parse {
            location: side.display().to_string(),
            message: format!("{} ids for {} embedding rows", ids.len(), rows.len()),
        });
    }
    Ok(EmbeddingTable { modality, ids, rows })
}

pub fn encode_codebooks(stack: &CodebookStack) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.push(stack.modality.byte());
    for v in [stack.depth(), stack.size(), stack.dim()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for l in 0..stack.depth() {
        write_f32s(&mut out, stack.level(l));
    }
    out
}

pub fn decode_codebooks<R: Read>(r: R) -> Result<CodebookStack> {
    let mut r = ByteReader::new(r);
    read_magic(&mut r, CODEBOOK_MAGIC)?;
    let modality = modality_byte(&mut r)?;
    let depth = read_u64(&mut r)? as usize;
    let size = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let mut levels = Vec::with_capacity(depth);
    for _ in 0..depth {
        let flat = read_f32s(&mut r, size * dim)?;
        levels.push(flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect());
    }
    CodebookStack::new(modality, levels)
}

pub fn save_codebooks(path: &Path, stack: &CodebookStack) -> Result<()> {
    std::fs::write(path, encode_codebooks(stack)).map_err(|e| Error::io(path, e))
}

pub fn load_codebooks(path: &Path) -> Result<CodebookStack> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_codebooks(&bytes[..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_round_trip_bytes() {
        let rows = vec![vec![0.5, -1.25], vec![3.0, 0.0]];
        let bytes = encode_embeddings(Modality::Vision, &rows).unwrap();
        let (m, back) = decode_embeddings(&bytes[..]).unwrap();
        assert_eq!(m, Modality::Vision);
        assert_eq!(back, rows);
        assert_eq!(encode_embeddings(m, &back).unwrap(), bytes);
    }

    #[test]
    fn embeddings_bad_magic_and_truncation() {
        let mut bytes = encode_embeddings(Modality::Text, &[vec![1.0; 3]]).unwrap();
        let short = bytes[..bytes.len() - 2].to_vec();
        assert!(matches!(decode_embeddings(&short[..]), Err(Error::Truncated { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_embeddings(&bytes[..]), Err(Error::BadMagic { offset: 0, .. })));
    }

    #[test]
    fn codebooks_round_trip_bytes() {
        let stack = CodebookStack::new(
            Modality::Text,
            vec![vec![vec![0.0, 1.0], vec![2.0, 3.0]], vec![vec![-1.0, 0.5], vec![0.25, 0.0]]],
        )
        .unwrap();
        let bytes = encode_codebooks(&stack);
        let back = decode_codebooks(&bytes[..]).unwrap();
        assert_eq!(back, stack);
        assert_eq!(encode_codebooks(&back), bytes);
    }
}
