use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EmbeddingVector, RetrievalError};

/// Text embedding backend.
///
/// Implementors provide [`Embedder::embed_unchecked`]; callers use
/// [`Embedder::embed`] and [`Embedder::embed_batch`], which enforce the
/// non-empty input and dimension contracts.
pub trait Embedder: Send + Sync {
    fn embedder_id(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Embed `texts` without validating inputs or output dimensions.
    fn embed_unchecked(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(RetrievalError::EmptyText);
        }
        let raw = self.embed_unchecked(texts)?;
        if raw.len() != texts.len() {
            return Err(RetrievalError::EmbedderUnavailable(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                raw.len()
            )));
        }
        raw.into_iter()
            .map(|values| {
                if values.len() != self.dimension() {
                    return Err(RetrievalError::DimensionMismatch {
                        expected: self.dimension(),
                        actual: values.len(),
                    });
                }
                Ok(EmbeddingVector::new(values))
            })
            .collect()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn embedder_id(&self) -> &str {
        (**self).embedder_id()
    }

    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn embed_unchecked(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        (**self).embed_unchecked(texts)
    }
}

/// Deterministic bag-of-words embedder.
///
/// Each lowercase alphanumeric token is hashed (64-bit FNV-1a) into one of
/// `dimension` buckets; bucket counts are L2-normalised. Texts sharing words
/// get positive cosine similarity.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    id: String,
}

impl HashEmbedder {
    pub const DEFAULT_DIMENSION: usize = 64;

    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashEmbedder { dimension, id: format!("hash-bow-{dimension}") }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut counts = vec![0.0; self.dimension];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let bucket = fnv1a(token.to_lowercase().as_bytes()) % self.dimension as u64;
            counts[bucket as usize] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter_mut().for_each(|c| *c /= norm);
        }
        counts
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(Self::DEFAULT_DIMENSION)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Embedder for HashEmbedder {
    fn embedder_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_unchecked(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Settings for a remote embedding service speaking
/// `{"texts": [...]}` -> `{"vectors": [[...]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderSettings {
    pub url: String,
    pub dimension: usize,
    /// Identifies the model behind the service; part of index cache keys.
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

pub struct HttpEmbedder {
    settings: HttpEmbedderSettings,
    agent: ureq::Agent,
    id: String,
}

impl HttpEmbedder {
    pub fn new(settings: HttpEmbedderSettings) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .build()
            .into();
        let id = match &settings.model_id {
            Some(model) => format!("http:{model}"),
            None => format!("http:{}", settings.url),
        };
        HttpEmbedder { settings, agent, id }
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

impl Embedder for HttpEmbedder {
    fn embedder_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.settings.dimension
    }

    fn embed_unchecked(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let unavailable = |e: ureq::Error| RetrievalError::EmbedderUnavailable(e.to_string());
        let mut response = self
            .agent
            .post(&self.settings.url)
            .send_json(EmbedRequest { texts })
            .map_err(unavailable)?;
        let body: EmbedResponse = response.body_mut().read_json().map_err(unavailable)?;
        Ok(body.vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::super::cosine;
    use super::*;

    #[test]
    fn deterministic_and_normalised() {
        let e = HashEmbedder::default();
        let a = e.embed("I like to play tennis.").unwrap();
        assert_eq!(a, e.embed("I like to play tennis.").unwrap());
        assert_eq!(a.values().len(), 64);
        assert!((a.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn case_and_punctuation_insensitive() {
        let e = HashEmbedder::default();
        assert_eq!(e.embed("Tennis, TENNIS!").unwrap(), e.embed("tennis tennis").unwrap());
    }

    #[test]
    fn different_words_are_not_identical() {
        let e = HashEmbedder::default();
        let abc = e.embed("abc").unwrap();
        let xyz = e.embed("xyz").unwrap();
        // Oracle: each single-token text occupies one bucket; distinct buckets are orthogonal.
        let same_bucket = fnv1a(b"abc") % 64 == fnv1a(b"xyz") % 64;
        let expected = if same_bucket { 1.0 } else { 0.0 };
        assert!(!same_bucket);
        assert_eq!(cosine(&abc, &xyz).unwrap(), expected);
    }

    #[test]
    fn empty_text_rejected() {
        let e = HashEmbedder::default();
        assert!(matches!(e.embed(""), Err(RetrievalError::EmptyText)));
        assert!(matches!(e.embed_batch(&["ok", "  "]), Err(RetrievalError::EmptyText)));
    }

    #[test]
    fn wrong_dimension_detected() {
        struct Short;
        impl Embedder for Short {
            fn embedder_id(&self) -> &str {
                "short"
            }
            fn dimension(&self) -> usize {
                4
            }
            fn embed_unchecked(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
                Ok(texts.iter().map(|_| vec![1.0; 3]).collect())
            }
        }
        assert!(matches!(
            Short.embed("x"),
            Err(RetrievalError::DimensionMismatch { expected: 4, actual: 3 })
        ));
    }
}
