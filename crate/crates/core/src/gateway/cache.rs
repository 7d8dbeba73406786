use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::{ChatMessage, CompletionRequest, GenerationConfig};

/// How a [`super::Gateway`] uses its replay cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// No caching.
    #[default]
    Off,
    /// Serve hits from the cache; on a miss call the provider and append.
    Record,
    /// Serve hits only. A miss is an error and the provider is never called.
    Replay,
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {source}")]
    Corrupt { path: PathBuf, line: usize, source: serde_json::Error },
}

/// One recorded completion, stored as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequestRecord {
    pub request_hash: String,
    pub model_id: String,
    pub config: GenerationConfig,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub sample: u32,
    pub response_text: String,
    pub provider_id: String,
    pub created_at: DateTime<Utc>,
}

impl LlmRequestRecord {
    pub(crate) fn new(hash: String, request: &CompletionRequest<'_>, response: &str, provider_id: &str) -> Self {
        LlmRequestRecord {
            request_hash: hash,
            model_id: request.model_id.to_owned(),
            config: request.config.clone(),
            messages: request.messages.to_vec(),
            sample: request.sample,
            response_text: response.to_owned(),
            provider_id: provider_id.to_owned(),
            created_at: Utc::now(),
        }
    }
}

/// Content-addressed completion store backed by a JSON-lines file.
///
/// Reads are concurrent; appends go through a single writer lock and are
/// flushed line by line, so a crash loses at most the record in flight.
#[derive(Debug)]
pub struct ReplayCache {
    path: PathBuf,
    records: RwLock<HashMap<String, LlmRequestRecord>>,
    writer: Mutex<Option<File>>,
}

impl ReplayCache {
    /// Load `path` if it exists; a missing file is an empty cache.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let path = path.into();
        let mut records = HashMap::new();
        match File::open(&path) {
            Ok(file) => {
                for (i, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|source| CacheError::Io { path: path.clone(), source })?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let record: LlmRequestRecord = serde_json::from_str(&line).map_err(|source| {
                        CacheError::Corrupt { path: path.clone(), line: i + 1, source }
                    })?;
                    records.insert(record.request_hash.clone(), record);
                }
            }
            Err(err) if err.kind() == io::ErrorKind::NotFound => {}
            Err(source) => return Err(CacheError::Io { path, source }),
        }
        Ok(ReplayCache {
            path,
            records: RwLock::new(records),
            writer: Mutex::new(None),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, hash: &str) -> Option<LlmRequestRecord> {
        self.records.read().get(hash).cloned()
    }

    /// Append a record unless one with the same hash is already stored.
    pub fn append(&self, record: LlmRequestRecord) -> Result<(), CacheError> {
        let io_err = |source| CacheError::Io { path: self.path.clone(), source };
        let mut writer = self.writer.lock();
        if self.records.read().contains_key(&record.request_hash) {
            return Ok(());
        }
        if writer.is_none() {
            if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(io_err)?;
            }
            let file = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io_err)?;
            *writer = Some(file);
        }
        let file = writer.as_mut().expect("writer opened above");
        let mut line = serde_json::to_string(&record).expect("records always serialize");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io_err)?;
        file.flush().map_err(io_err)?;
        self.records.write().insert(record.request_hash.clone(), record);
        Ok(())
    }
}
