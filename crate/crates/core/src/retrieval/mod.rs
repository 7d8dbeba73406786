//! Multi-level schema retrieval.
//!
//! Every schema of a persona is embedded twice over: once as a whole document
//! and once per fact. For a query utterance the single most similar schema is
//! selected by cosine similarity, and its facts are ranked against the same
//! query. The scan is exhaustive, so results are exact.

mod embedder;
mod index;

use serde::{Deserialize, Serialize};

pub use embedder::{Embedder, HashEmbedder, HttpEmbedder, HttpEmbedderSettings};
pub use index::{EmbeddingIndex, SchemaVectors};

use crate::schema::{FactId, Persona, Section};

/// Facts retrieved from the selected schema by default.
pub const DEFAULT_N_FACTS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("index is empty")]
    EmptyIndex,
    #[error("index was built with embedder {index} but queried with {query}")]
    EmbedderMismatch { index: String, query: String },
    #[error("schema {0} has no vectors in the index")]
    MissingSchema(String),
    #[error("failed to embed schema {schema_id}: {source}")]
    Schema { schema_id: String, source: Box<RetrievalError> },
    #[error("index file {path}: {message}")]
    Persist { path: String, message: String },
}

/// Dense vector with its Euclidean norm cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        EmbeddingVector { values, norm }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        EmbeddingVector::new(self.values.iter().map(|v| v * factor).collect())
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(values: Vec<f64>) -> Self {
        EmbeddingVector::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// `a·b / (‖a‖‖b‖)`, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dimension() != b.dimension() {
        return Err(RetrievalError::DimensionMismatch { expected: a.dimension(), actual: b.dimension() });
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

/// Cosine for ranking: a zero-norm side scores 0 instead of failing, so a
/// query without content words still ranks deterministically by id.
fn rank_score(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    match cosine(a, b) {
        Err(RetrievalError::ZeroNorm) => Ok(0.0),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFact {
    pub fact_id: FactId,
    pub section: Section,
    pub text: String,
    pub score: f64,
}

/// The selected schema and its ranked facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub schema_id: String,
    pub schema_header: String,
    pub schema_score: f64,
    /// Every fact of the schema, header included, by descending score; ties
    /// go to the smaller fact id.
    pub scored_facts: Vec<ScoredFact>,
    /// Ids of the top non-header facts, in rank order.
    pub selected_fact_ids: Vec<FactId>,
    /// Texts of the top non-header facts, in rank order.
    pub selected_facts: Vec<String>,
}

/// Embed `prev_utterance` and retrieve against `index`.
pub fn retrieve(
    index: &EmbeddingIndex,
    persona: &Persona,
    embedder: &dyn Embedder,
    prev_utterance: &str,
    n_facts: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if index.embedder_id() != embedder.embedder_id() {
        return Err(RetrievalError::EmbedderMismatch {
            index: index.embedder_id().to_owned(),
            query: embedder.embedder_id().to_owned(),
        });
    }
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let query = embedder.embed(prev_utterance)?;
    retrieve_with_query(index, persona, &query, n_facts)
}

/// Retrieve with an already-embedded query.
pub fn retrieve_with_query(
    index: &EmbeddingIndex,
    persona: &Persona,
    query: &EmbeddingVector,
    n_facts: usize,
) -> Result<RetrievalResult, RetrievalError> {
    // Ids iterate in ascending order, so keeping only strict improvements
    // leaves ties with the smaller id.
    let mut best: Option<(&str, f64)> = None;
    for (schema_id, vectors) in index.iter() {
        let score = rank_score(&vectors.document, query)?;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((schema_id, score));
        }
    }
    let (schema_id, schema_score) = best.ok_or(RetrievalError::EmptyIndex)?;
    let schema = persona
        .schema(schema_id)
        .ok_or_else(|| RetrievalError::MissingSchema(schema_id.to_owned()))?;
    let vectors = index.schema(schema_id).expect("id came from the index");

    let mut scored_facts = schema
        .all_facts()
        .map(|fact| {
            let vector = vectors
                .facts
                .get(&fact.fact_id)
                .ok_or_else(|| RetrievalError::MissingSchema(schema_id.to_owned()))?;
            Ok(ScoredFact {
                score: rank_score(vector, query)?,
                fact_id: fact.fact_id,
                section: fact.section,
                text: fact.text.to_owned(),
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    scored_facts.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.fact_id.cmp(&b.fact_id)));

    let selected: Vec<&ScoredFact> = scored_facts
        .iter()
        .filter(|f| f.section != Section::Header)
        .take(n_facts)
        .collect();
    Ok(RetrievalResult {
        schema_id: schema_id.to_owned(),
        schema_header: schema.header().to_owned(),
        schema_score,
        selected_fact_ids: selected.iter().map(|f| f.fact_id.clone()).collect(),
        selected_facts: selected.iter().map(|f| f.text.clone()).collect(),
        scored_facts,
    })
}
