use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EmbeddingVector, VectorError};

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, VectorError>;
    /// Stable identifier stored with the index so queries use the same model.
    fn id(&self) -> String;
}

/// Words dropped by the hashing embedder before counting.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "of", "on",
    "or", "that", "the", "this", "to", "was", "with",
];

/// Offline bag-of-words embedder: lowercase alphanumeric tokens, stop words
/// removed, each token adds 1.0 at `fnv1a64(token) % dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .filter(|t| !STOP_WORDS.contains(&t.as_str()))
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(64)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, VectorError> {
        if text.trim().is_empty() {
            return Err(VectorError::EmptyText);
        }
        let mut values = vec![0.0f32; self.dim];
        for token in Self::tokens(text) {
            values[self.bucket(&token)] += 1.0;
        }
        EmbeddingVector::new(values)
    }

    fn id(&self) -> String {
        format!("hashing-bow-{}", self.dim)
    }
}

/// Which embedder an index was built with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Hashing {
        dim: usize,
    },
    Remote {
        base_url: String,
        model: String,
        dim: usize,
    },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashing { dim: 64 }
    }
}

impl EmbedderConfig {
    /// Instantiates the embedder; the remote key comes from `EMBEDDER_API_KEY`.
    pub fn build(&self) -> Box<dyn Embedder> {
        match self {
            EmbedderConfig::Hashing { dim } => Box::new(HashingEmbedder::new(*dim)),
            EmbedderConfig::Remote {
                base_url,
                model,
                dim,
            } => Box::new(HttpEmbedder::new(
                base_url.clone(),
                model.clone(),
                std::env::var("EMBEDDER_API_KEY").ok(),
                *dim,
            )),
        }
    }
}

/// Remote embedder speaking the common `{model, input}` ->
/// `{data: [{embedding}]}` contract.
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(base_url: String, model: String, api_key: Option<String>, dim: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEmbedder {
            base_url,
            model,
            api_key,
            dim,
            agent,
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f32>,
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, VectorError> {
        if text.trim().is_empty() {
            return Err(VectorError::EmptyText);
        }
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let mut request = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(serde_json::json!({ "model": self.model, "input": [text] }))
            .map_err(|e| VectorError::Remote(e.to_string()))?;
        if !response.status().is_success() {
            return Err(VectorError::Remote(format!("HTTP {}", response.status())));
        }
        let reply: EmbeddingReply = response
            .body_mut()
            .read_json()
            .map_err(|e| VectorError::Remote(e.to_string()))?;
        let values = reply
            .data
            .into_iter()
            .next()
            .ok_or_else(|| VectorError::Remote("reply carried no embedding".into()))?
            .embedding;
        if values.len() != self.dim {
            return Err(VectorError::DimensionMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        EmbeddingVector::new(values)
    }

    fn id(&self) -> String {
        format!("remote-{}-{}", self.model, self.dim)
    }
}
