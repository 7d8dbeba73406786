use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse_schema, print_schema, EventSchema, ParseError, Persona, Provenance};

const INDEX_FILE: &str = "index.json";

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LibraryError + '_ {
    move |source| LibraryError::Io { path: path.to_owned(), source }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> LibraryError + '_ {
    move |source| LibraryError::Json { path: path.to_owned(), source }
}

/// One entry of a library's `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaIndexEntry {
    pub file: String,
    pub persona_fact_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Provenance>,
}

/// A flat directory of `<id>.schema` files plus an `index.json` manifest
/// mapping schema ids to files and persona facts.
#[derive(Debug, Clone)]
pub struct SchemaLibrary {
    dir: PathBuf,
}

impl SchemaLibrary {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SchemaLibrary { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn exists(&self) -> bool {
        self.dir.join(INDEX_FILE).is_file()
    }

    /// Write every schema and a fresh manifest. Files of schemas no longer
    /// present are left alone but dropped from the manifest.
    pub fn save(&self, schemas: &[EventSchema]) -> Result<(), LibraryError> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let mut index = BTreeMap::new();
        for schema in schemas {
            let file = format!("{}.schema", schema.id());
            let path = self.dir.join(&file);
            let mut text = print_schema(schema);
            text.push('\n');
            fs::write(&path, text).map_err(io_err(&path))?;
            index.insert(
                schema.id().to_owned(),
                SchemaIndexEntry {
                    file,
                    persona_fact_id: schema.source().map(|s| s.persona_fact_id.clone()),
                    source: schema.source().cloned(),
                },
            );
        }
        let path = self.dir.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(&index).map_err(json_err(&path))?;
        fs::write(&path, json + "\n").map_err(io_err(&path))
    }

    /// Load all schemas listed in the manifest, in schema-id order.
    pub fn load(&self) -> Result<Vec<EventSchema>, LibraryError> {
        let path = self.dir.join(INDEX_FILE);
        let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
        let index: BTreeMap<String, SchemaIndexEntry> =
            serde_json::from_str(&raw).map_err(json_err(&path))?;
        index
            .into_iter()
            .map(|(id, entry)| {
                let path = self.dir.join(&entry.file);
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let schema = parse_schema(&text)
                    .map_err(|source| LibraryError::Parse { path: path.clone(), source })?
                    .with_id(id);
                Ok(match entry.source {
                    Some(src) => schema.with_source(src),
                    None => schema,
                })
            })
            .collect()
    }
}

/// On-disk persona description: `{persona_id, facts, schema_dir}`.
/// `schema_dir` is resolved relative to the persona file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaFile {
    pub persona_id: String,
    pub facts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_dir: Option<PathBuf>,
}

impl PersonaFile {
    pub fn read(path: &Path) -> Result<Self, LibraryError> {
        let raw = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&raw).map_err(json_err(path))
    }

    pub fn write(&self, path: &Path) -> Result<(), LibraryError> {
        let json = serde_json::to_string_pretty(self).map_err(json_err(path))?;
        fs::write(path, json + "\n").map_err(io_err(path))
    }

    /// Schema directory resolved against the directory holding `persona_path`.
    pub fn resolved_schema_dir(&self, persona_path: &Path) -> Option<PathBuf> {
        let dir = self.schema_dir.as_ref()?;
        Some(match persona_path.parent() {
            Some(parent) if dir.is_relative() => parent.join(dir),
            _ => dir.clone(),
        })
    }

    /// Build a [`Persona`], loading schemas when the library exists.
    pub fn load_persona(&self, persona_path: &Path) -> Result<Persona, LibraryError> {
        let mut persona = Persona::new(self.persona_id.clone(), self.facts.clone());
        if let Some(dir) = self.resolved_schema_dir(persona_path) {
            let library = SchemaLibrary::new(dir);
            if library.exists() {
                persona.schemas = library.load()?;
            }
        }
        Ok(persona)
    }
}
