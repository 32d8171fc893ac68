//! Sentence embeddings and the group-sum compression applied to them.
//!
//! The local provider is a signed feature hasher over whitespace-token
//! trigrams: each trigram is hashed with FNV-1a 64, bumps index
//! `hash % dim` by +1 or -1 depending on bit 63, and the result is
//! L2-normalised. Texts with fewer than three tokens hash their whole token
//! sequence as a single gram.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub const EMBED_DIM: usize = 768;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("vector length {len} is not divisible into {groups} groups")]
    IndivisibleGroups { len: usize, groups: usize },
}

/// Dimensions of the raw embedding and its two compressed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub d_app: usize,
    pub d_user: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: EMBED_DIM,
            d_app: 4,
            d_user: 16,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        for groups in [self.d_app, self.d_user] {
            if groups == 0 || self.dim % groups != 0 {
                return Err(EmbedError::IndivisibleGroups { len: self.dim, groups });
            }
        }
        Ok(())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Yields the grams of a text as byte strings (tokens joined by one space).
pub fn token_trigrams(text: &str) -> Vec<String> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    match tokens.len() {
        0 => Vec::new(),
        1 | 2 => vec![tokens.join(" ")],
        _ => tokens.windows(3).map(|w| w.join(" ")).collect(),
    }
}

/// Deterministic hashed embedding of `text` into `dim` dimensions.
pub fn embed_with_dim(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for gram in token_trigrams(text) {
        let h = fnv1a64(gram.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn embed(text: &str) -> Vec<f64> {
    embed_with_dim(text, EMBED_DIM)
}

/// Splits `v` into `groups` equal runs and reduces each to
/// `sum / sqrt(run length)`.
pub fn compress(v: &[f64], groups: usize) -> Result<Vec<f64>, EmbedError> {
    if groups == 0 || v.len() % groups != 0 {
        return Err(EmbedError::IndivisibleGroups { len: v.len(), groups });
    }
    let size = v.len() / groups;
    let scale = (size as f64).sqrt();
    Ok(v.chunks(size).map(|c| c.iter().sum::<f64>() / scale).collect())
}

/// Source of sentence embeddings.
pub trait EmbeddingProvider: Send + Sync {
    /// Embeds every text; output order matches input order.
    fn embed_batch(&self, texts: &[&str]) -> Vec<Vec<f64>>;
}

/// The deterministic trigram hasher.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalHasher;

impl EmbeddingProvider for LocalHasher {
    fn embed_batch(&self, texts: &[&str]) -> Vec<Vec<f64>> {
        texts.iter().map(|t| embed(t)).collect()
    }
}

#[derive(Serialize)]
struct EmbedRequestBody<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponseBody {
    embeddings: Vec<Vec<f64>>,
}

/// Client for an external embedding service (`POST {base}/embed`).
///
/// Any transport error, timeout, or malformed reply falls back to the local
/// hasher for that call and logs a warning.
pub struct HttpEmbedder {
    endpoint: String,
    agent: ureq::Agent,
    fallback: LocalHasher,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self {
            endpoint: format!("{}/embed", base_url.trim_end_matches('/')),
            agent,
            fallback: LocalHasher,
        }
    }

    fn try_remote(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, String> {
        let resp = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequestBody { texts })
            .map_err(|e| e.to_string())?;
        let body: EmbedResponseBody = resp.into_json().map_err(|e| e.to_string())?;
        if body.embeddings.len() != texts.len() {
            return Err(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                body.embeddings.len()
            ));
        }
        if let Some(bad) = body.embeddings.iter().find(|e| e.len() != EMBED_DIM) {
            return Err(format!("embedding has {} dims, expected {EMBED_DIM}", bad.len()));
        }
        Ok(body.embeddings)
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Vec<Vec<f64>> {
        match self.try_remote(texts) {
            Ok(v) => v,
            Err(e) => {
                warn!(endpoint = %self.endpoint, error = %e, "embedding service failed, using local hasher");
                self.fallback.embed_batch(texts)
            }
        }
    }
}
