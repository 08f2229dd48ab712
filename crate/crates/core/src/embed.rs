//! Frozen text encoder producing node attribute vectors.
//!
//! The default [`HashedEmbedder`] hashes lowercased character 3-grams into a
//! fixed number of signed buckets and L2-normalizes the result. A
//! [`RemoteEmbedder`] forwards to an HTTP service for inference-time use.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const MIN_EMBED_DIM: usize = 8;
pub const EMBED_ENDPOINT_ENV: &str = "GTOOL_EMBED_ENDPOINT";

/// Fixed-dimension attribute vector `a_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrVector(pub Vec<f64>);

impl AttrVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &AttrVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
    pub endpoint: Option<String>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hashed,
            dim: DEFAULT_EMBED_DIM,
            seed: 0,
            endpoint: None,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < MIN_EMBED_DIM {
            return Err(Error::Config(format!(
                "embedding dim {} is below the minimum of {MIN_EMBED_DIM}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Builds the configured embedder. The remote endpoint falls back to
    /// `GTOOL_EMBED_ENDPOINT` when unset.
    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        match self.kind {
            EmbedderKind::Hashed => Ok(Box::new(HashedEmbedder::new(self.dim, self.seed))),
            EmbedderKind::Remote => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .or_else(|| std::env::var(EMBED_ENDPOINT_ENV).ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "remote embedder needs an endpoint or {EMBED_ENDPOINT_ENV}"
                        ))
                    })?;
                Ok(Box::new(RemoteEmbedder::new(endpoint, self.dim)))
            }
        }
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<AttrVector>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<AttrVector>> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.embed_text(t).map_err(|e| Error::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEmbedder {
    dim: usize,
    seed: u64,
}

impl HashedEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Character 3-grams of the lowercased text. Texts shorter than three
/// characters contribute themselves as a single gram.
pub fn char_trigrams(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    match chars.len() {
        0 => Vec::new(),
        1 | 2 => vec![chars.iter().collect()],
        _ => chars.windows(3).map(|w| w.iter().collect()).collect(),
    }
}

impl Embedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<AttrVector> {
        let mut v = vec![0.0; self.dim];
        for gram in char_trigrams(text) {
            let h = xxh3_64_with_seed(gram.as_bytes(), self.seed);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Empty text (or perfectly cancelling grams) stays all-zeros.
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(AttrVector(v))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Blocking HTTP client: `POST {"texts": [...]}` → `{"vectors": [[...], ...]}`.
pub struct RemoteEmbedder {
    endpoint: String,
    dim: usize,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            dim,
            agent,
        }
    }

    fn call(&self, texts: &[&str]) -> Result<Vec<AttrVector>> {
        let response: EmbedResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .map_err(|e| Error::RemoteUnavailable(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::RemoteUnavailable(e.to_string()))?;
        if response.vectors.len() != texts.len() {
            return Err(Error::RemoteUnavailable(format!(
                "asked for {} vectors, received {}",
                texts.len(),
                response.vectors.len()
            )));
        }
        response
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    Err(Error::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    })
                } else {
                    Ok(AttrVector(v))
                }
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<AttrVector> {
        Ok(self.call(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<AttrVector>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.call(texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashedEmbedder::new(256, 3);
        let a = e.embed_text("Image Segmentation").unwrap();
        let b = e.embed_text("Image Segmentation").unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert!((a.dot(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_zero() {
        let e = HashedEmbedder::new(64, 0);
        let v = e.embed_text("").unwrap();
        assert_eq!(v.dim(), 64);
        assert!(v.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn case_insensitive_and_seed_sensitive() {
        let e = HashedEmbedder::new(128, 1);
        assert_eq!(e.embed_text("Depth").unwrap(), e.embed_text("dEPTH").unwrap());
        let other = HashedEmbedder::new(128, 2);
        assert_ne!(e.embed_text("depth").unwrap(), other.embed_text("depth").unwrap());
    }

    #[test]
    fn short_texts_embed_to_unit_vectors() {
        let e = HashedEmbedder::new(32, 0);
        assert!((e.embed_text("a").unwrap().norm() - 1.0).abs() < 1e-12);
        assert!((e.embed_text("ab").unwrap().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_single() {
        let e = HashedEmbedder::new(64, 9);
        assert!(e.embed_batch(&[]).unwrap().is_empty());
        let batch = e.embed_batch(&["alpha", "beta"]).unwrap();
        assert_eq!(batch[0], e.embed_text("alpha").unwrap());
        assert_eq!(batch[1], e.embed_text("beta").unwrap());
    }

    #[test]
    fn config_rejects_tiny_dims() {
        let cfg = EmbedderConfig {
            dim: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(EmbedderConfig::default().build().unwrap().dim(), 256);
    }
}
