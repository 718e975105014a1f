use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::live::{HttpTransport, JsonTransport, RetryPolicy};
use super::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub vector: Vec<f64>,
    pub model: String,
}

#[async_trait]
pub trait Embedder: Send + Sync {
    fn model(&self) -> &str;

    /// One vector per text, in order.
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

/// Hashed bag-of-words vectors: each lowercase token adds ±1 to a bucket
/// chosen by a seeded hash, and the result is L2-normalized. Texts sharing
/// words land close together, and equal texts always get equal vectors.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self {
            dimension: 64,
            seed: 0,
        }
    }
}

impl MockEmbedder {
    fn bucket(&self, token: &str) -> (usize, f64) {
        let mut h = Sha256::new();
        h.update(self.seed.to_be_bytes());
        h.update(token.as_bytes());
        let d = h.finalize();
        let idx = u64::from_be_bytes(d[..8].try_into().expect("8 bytes")) % self.dimension as u64;
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        (idx as usize, sign)
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push(lower.as_str());
        }
        for t in tokens {
            let (i, s) = self.bucket(t);
            v[i] += s;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            // tokens cancelled out; fall back to the whole-text bucket
            let (i, s) = self.bucket(&lower);
            v[i] = s;
        }
        v
    }
}

#[async_trait]
impl Embedder for MockEmbedder {
    fn model(&self) -> &str {
        "mock-hash-embedding"
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// `POST /embeddings` on an OpenAI-compatible provider.
pub struct OpenAiEmbedder {
    transport: Arc<dyn JsonTransport>,
    model: String,
    retry: RetryPolicy,
    batch_size: usize,
}

impl OpenAiEmbedder {
    pub fn new(transport: Arc<dyn JsonTransport>, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
            retry: RetryPolicy::default(),
            batch_size: 100,
        }
    }

    pub fn from_env(model: impl Into<String>) -> Result<Self, GatewayError> {
        Ok(Self::new(Arc::new(HttpTransport::from_env()?), model))
    }
}

#[async_trait]
impl Embedder for OpenAiEmbedder {
    fn model(&self) -> &str {
        &self.model
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let body = json!({ "model": self.model, "input": chunk });
            let (reply, _) = self
                .retry
                .run(|| self.transport.post_json("embeddings", &body))
                .await?;
            let mut data: Vec<(usize, Vec<f64>)> = reply["data"]
                .as_array()
                .ok_or_else(|| GatewayError::Provider("embedding reply has no data".into()))?
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let idx = d["index"].as_u64().map(|x| x as usize).unwrap_or(i);
                    let v = d["embedding"]
                        .as_array()
                        .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
                        .unwrap_or_default();
                    (idx, v)
                })
                .collect();
            data.sort_by_key(|(i, _)| *i);
            out.extend(data.into_iter().map(|(_, v)| v));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[tokio::test]
    async fn fixed_dimension_and_order() {
        let e = MockEmbedder::default();
        let texts: Vec<String> = ["a", "b b", "c"].iter().map(|s| s.to_string()).collect();
        let out = e.embed(&texts).await.unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|v| v.len() == 64));
        assert_eq!(out[1], e.vector("b b"));
    }

    #[test]
    fn equal_texts_equal_vectors_and_unit_norm() {
        let e = MockEmbedder::default();
        assert_eq!(e.vector("scales reduce drag"), e.vector("scales reduce drag"));
        let n: f64 = e.vector("scales reduce drag").iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(e.vector("").len(), 64);
    }

    #[test]
    fn shared_words_are_closer() {
        let e = MockEmbedder::default();
        let a = e.vector("ridged scales reduce drag in water");
        let b = e.vector("ridged scales reduce drag in air");
        let c = e.vector("sticky toe pads grip glass");
        assert!(dist(&a, &b) < dist(&a, &c));
    }
}
