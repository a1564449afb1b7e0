//! Exact cosine-similarity store over method documents.

mod embed;
mod store;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::indexer::EmbeddingDocument;

pub use embed::{Embedder, EmbedderConfig, HashingEmbedder, HttpEmbedder, STOP_WORDS};
pub use store::{load, persist, DOCS_FILE, VECTORS_FILE};

#[derive(Debug, thiserror::Error)]
pub enum VectorError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("duplicate entry id {0}")]
    DuplicateId(u64),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("embedder request failed (retryable): {0}")]
    Remote(String),
    #[error("corrupt index artifact: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, VectorError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite);
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Cosine similarity; zero vectors score 0 against everything.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: u64,
    pub vector: EmbeddingVector,
    pub doc: EmbeddingDocument,
}

#[derive(Debug, Clone, Copy)]
pub struct RetrievalResult<'a> {
    pub entry: &'a IndexEntry,
    pub score: f64,
}

/// Built once per run, then only read.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        VectorIndex {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn insert(
        &mut self,
        id: u64,
        vector: EmbeddingVector,
        doc: EmbeddingDocument,
    ) -> Result<(), VectorError> {
        if vector.dim() != self.dim {
            return Err(VectorError::DimensionMismatch {
                expected: self.dim,
                actual: vector.dim(),
            });
        }
        if self.entries.iter().any(|e| e.id == id) {
            return Err(VectorError::DuplicateId(id));
        }
        self.entries.push(IndexEntry { id, vector, doc });
        Ok(())
    }

    /// Embeds every document, assigning ids in document order.
    pub fn build(
        embedder: &dyn Embedder,
        documents: &[EmbeddingDocument],
    ) -> Result<Self, VectorError> {
        let mut index = VectorIndex::new(embedder.dim());
        for (id, doc) in documents.iter().enumerate() {
            let vector = embedder.embed(&doc.document)?;
            index.insert(id as u64, vector, doc.clone())?;
        }
        Ok(index)
    }

    /// Exact top-`k` by cosine score, descending, ties by ascending id.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<RetrievalResult<'_>>, VectorError> {
        if k == 0 {
            return Err(VectorError::ZeroK);
        }
        if self.entries.is_empty() {
            return Err(VectorError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(VectorError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let mut results: Vec<RetrievalResult<'_>> = self
            .entries
            .iter()
            .map(|entry| RetrievalResult {
                entry,
                score: cosine(query, &entry.vector),
            })
            .collect();
        results.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then(a.entry.id.cmp(&b.entry.id))
        });
        results.truncate(k);
        Ok(results)
    }
}
