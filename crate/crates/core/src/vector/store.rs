//! On-disk format: `vectors.idx` holds ids and raw little-endian f32 values
//! with a sha256 trailer; `embedding_docs.jsonl` holds the documents in the
//! same order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{EmbeddingVector, VectorError, VectorIndex};
use crate::indexer::EmbeddingDocument;

pub const VECTORS_FILE: &str = "vectors.idx";
pub const DOCS_FILE: &str = "embedding_docs.jsonl";

const MAGIC: &[u8; 8] = b"PPVIDX\0\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;
const DIGEST_LEN: usize = 32;

pub fn persist(index: &VectorIndex, dir: &Path) -> Result<(), VectorError> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + index.len() * (8 + 4 * index.dim()));
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    bytes.extend_from_slice(&(index.len() as u64).to_le_bytes());
    for entry in index.entries() {
        bytes.extend_from_slice(&entry.id.to_le_bytes());
        for v in entry.vector.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    fs::write(dir.join(VECTORS_FILE), &bytes)?;

    let mut docs = fs::File::create(dir.join(DOCS_FILE))?;
    for entry in index.entries() {
        let line = serde_json::to_string(&entry.doc).expect("document serializes");
        writeln!(docs, "{line}")?;
    }
    docs.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> VectorError {
    VectorError::Corrupt(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

pub fn load(dir: &Path) -> Result<VectorIndex, VectorError> {
    let bytes = fs::read(dir.join(VECTORS_FILE))?;
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(corrupt("file too short"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(body, 8);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let dim = read_u32(body, 12) as usize;
    let count = read_u64(body, 16) as usize;
    let stride = 8 + 4 * dim;
    if body.len() != HEADER_LEN + count * stride {
        return Err(corrupt("length does not match header"));
    }

    let docs_file = fs::File::open(dir.join(DOCS_FILE))?;
    let mut docs = Vec::with_capacity(count);
    for line in BufReader::new(docs_file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: EmbeddingDocument =
            serde_json::from_str(&line).map_err(|e| corrupt(format!("document line: {e}")))?;
        docs.push(doc);
    }
    if docs.len() != count {
        return Err(corrupt(format!(
            "{} documents for {count} vectors",
            docs.len()
        )));
    }

    let mut index = VectorIndex::new(dim);
    for (i, doc) in docs.into_iter().enumerate() {
        let at = HEADER_LEN + i * stride;
        let id = read_u64(body, at);
        let values = (0..dim)
            .map(|j| {
                let p = at + 8 + 4 * j;
                f32::from_le_bytes(body[p..p + 4].try_into().unwrap())
            })
            .collect();
        index.insert(id, EmbeddingVector::new(values)?, doc)?;
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::tests::doc;
    use crate::vector::{Embedder, HashingEmbedder};

    fn sample() -> VectorIndex {
        let e = HashingEmbedder::new(16);
        let docs = vec![doc("parse header"), doc("render body"), doc("close socket")];
        let docs: Vec<_> = docs
            .into_iter()
            .map(|mut d| {
                d.document = d.unit_ref.qualified_name.clone();
                d
            })
            .collect();
        VectorIndex::build(&e, &docs).unwrap()
    }

    #[test]
    fn round_trip_preserves_search_results() {
        let dir = tempfile::tempdir().unwrap();
        let index = sample();
        persist(&index, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded, index);
        let q = HashingEmbedder::new(16).embed("render").unwrap();
        let a: Vec<(u64, f64)> = index
            .search(&q, 3)
            .unwrap()
            .iter()
            .map(|r| (r.entry.id, r.score))
            .collect();
        let b: Vec<(u64, f64)> = loaded
            .search(&q, 3)
            .unwrap()
            .iter()
            .map(|r| (r.entry.id, r.score))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        persist(&sample(), dir.path()).unwrap();
        let path = dir.path().join(VECTORS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[HEADER_LEN + 9] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(VectorError::Corrupt(_))));
    }

    #[test]
    fn document_count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        persist(&sample(), dir.path()).unwrap();
        let docs = fs::read_to_string(dir.path().join(DOCS_FILE)).unwrap();
        let first: String = docs.lines().take(1).collect();
        fs::write(dir.path().join(DOCS_FILE), first + "\n").unwrap();
        assert!(matches!(load(dir.path()), Err(VectorError::Corrupt(_))));
    }
}
