use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Embedder, EmbeddingVector, RetrievalError};
use crate::digest::json_digest;
use crate::par::Exec;
use crate::schema::{schema_document, EventSchema, FactId, Persona};

/// Vectors for one schema: the whole document plus every fact (header included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaVectors {
    pub content_digest: String,
    pub document: EmbeddingVector,
    pub facts: BTreeMap<FactId, EmbeddingVector>,
}

/// Precomputed schema- and fact-level embeddings for one persona.
///
/// Immutable once built; [`EmbeddingIndex::rebuild`] returns a new index that
/// reuses vectors of unchanged schemas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    embedder_id: String,
    dimension: usize,
    content_key: String,
    schemas: BTreeMap<String, SchemaVectors>,
}

/// Digest identifying the schemas an index covers under one embedder.
fn content_key(persona: &Persona, embedder_id: &str) -> String {
    let mut entries: Vec<(&str, String)> =
        persona.schemas.iter().map(|s| (s.id(), s.content_digest())).collect();
    entries.sort();
    json_digest(&(embedder_id, entries))
}

fn embed_schema(schema: &EventSchema, embedder: &dyn Embedder) -> Result<SchemaVectors, RetrievalError> {
    let document = schema_document(schema);
    let facts: Vec<_> = schema.all_facts().collect();
    let mut texts = vec![document.as_str()];
    texts.extend(facts.iter().map(|f| f.text));
    let mut vectors = embedder
        .embed_batch(&texts)
        .map_err(|e| RetrievalError::Schema { schema_id: schema.id().to_owned(), source: Box::new(e) })?
        .into_iter();
    let document = vectors.next().expect("one vector per text");
    Ok(SchemaVectors {
        content_digest: schema.content_digest(),
        document,
        facts: facts.into_iter().map(|f| f.fact_id).zip(vectors).collect(),
    })
}

impl EmbeddingIndex {
    pub fn build(persona: &Persona, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        Self::build_with(persona, embedder, None, Exec::default())
    }

    /// Build an index for `persona`, reusing vectors from this index for
    /// schemas whose id and content are unchanged.
    pub fn rebuild(&self, persona: &Persona, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        Self::build_with(persona, embedder, Some(self), Exec::default())
    }

    pub fn build_with(
        persona: &Persona,
        embedder: &dyn Embedder,
        previous: Option<&EmbeddingIndex>,
        exec: Exec,
    ) -> Result<Self, RetrievalError> {
        if persona.schemas.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let previous = previous.filter(|p| p.embedder_id == embedder.embedder_id());
        let reusable = |schema: &EventSchema| {
            previous
                .and_then(|p| p.schemas.get(schema.id()))
                .filter(|v| v.content_digest == schema.content_digest())
                .cloned()
        };
        let vectors = exec.map(&persona.schemas, |schema| match reusable(schema) {
            Some(v) => Ok(v),
            None => embed_schema(schema, embedder),
        });
        let mut schemas = BTreeMap::new();
        for (schema, v) in persona.schemas.iter().zip(vectors) {
            schemas.insert(schema.id().to_owned(), v?);
        }
        Ok(EmbeddingIndex {
            embedder_id: embedder.embedder_id().to_owned(),
            dimension: embedder.dimension(),
            content_key: content_key(persona, embedder.embedder_id()),
            schemas,
        })
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn content_key(&self) -> &str {
        &self.content_key
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    pub fn schema_count(&self) -> usize {
        self.schemas.len()
    }

    pub fn fact_vector_count(&self) -> usize {
        self.schemas.values().map(|s| s.facts.len()).sum()
    }

    pub fn schema(&self, schema_id: &str) -> Option<&SchemaVectors> {
        self.schemas.get(schema_id)
    }

    /// Schemas in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &SchemaVectors)> {
        self.schemas.iter().map(|(id, v)| (id.as_str(), v))
    }

    /// Whether this index covers exactly the current schemas of `persona`.
    pub fn is_current(&self, persona: &Persona, embedder: &dyn Embedder) -> bool {
        self.embedder_id == embedder.embedder_id() && self.content_key == content_key(persona, &self.embedder_id)
    }

    /// Copy with every stored vector multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for v in out.schemas.values_mut() {
            v.document = v.document.scaled(factor);
            v.facts.values_mut().for_each(|f| *f = f.scaled(factor));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let persist = |message: String| RetrievalError::Persist { path: path.display().to_string(), message };
        let json = serde_json::to_vec(self).map_err(|e| persist(e.to_string()))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| persist(e.to_string()))?;
        }
        std::fs::write(path, json).map_err(|e| persist(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let persist = |message: String| RetrievalError::Persist { path: path.display().to_string(), message };
        let raw = std::fs::read(path).map_err(|e| persist(e.to_string()))?;
        serde_json::from_slice(&raw).map_err(|e| persist(e.to_string()))
    }

    /// Load the sidecar at `path` when it matches the persona's schemas and
    /// the embedder; otherwise rebuild (reusing what still matches) and save.
    pub fn load_or_build(path: &Path, persona: &Persona, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let stale = match Self::load(path) {
            Ok(index) if index.is_current(persona, embedder) => return Ok(index),
            Ok(index) => Some(index),
            Err(_) => None,
        };
        let index = Self::build_with(persona, embedder, stale.as_ref(), Exec::default())?;
        index.save(path)?;
        Ok(index)
    }
}
