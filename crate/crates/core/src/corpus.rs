//! PersonaChat-style datasets and batch pipeline runs.
//!
//! The input format is JSON lines, one dialogue context per line:
//! `{"personality": [..], "history": [..], "candidates": [..]}`. The last
//! candidate is the gold response; history turns alternate and the last one
//! belongs to the user.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::gateway::Gateway;
use crate::generation::{DialogueState, GeneratedResponse, GenerationSettings, Generator, Mode, Speaker, Turn};
use crate::induction::{Inducer, InductionConfig, InductionFailure};
use crate::par::Exec;
use crate::retrieval::{Embedder, EmbeddingIndex};
use crate::schema::{Persona, SchemaLibrary};

/// Directory holding `<split>.jsonl` files.
pub const ENV_DATASET_ROOT: &str = "HABITUS_DATASET_ROOT";

/// The bundled 10-item test fixture.
pub const FIXTURE_JSONL: &str = include_str!("../fixtures/personachat_10.jsonl");

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("item {index}: {message}")]
    Format { index: usize, message: String },
    #[error("no dataset path given and {ENV_DATASET_ROOT} is not set")]
    NoDatasetRoot,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "val" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub item_id: String,
    pub persona_facts: Vec<String>,
    pub history: Vec<Turn>,
    pub gold_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub personality: Vec<String>,
    pub history: Vec<String>,
    pub candidates: Vec<String>,
}

impl RawRecord {
    pub fn into_item(self, item_id: String, index: usize) -> Result<DatasetItem, CorpusError> {
        let format = |message: &str| CorpusError::Format { index, message: message.to_owned() };
        let gold_response = self
            .candidates
            .last()
            .map(|c| c.trim().to_owned())
            .filter(|c| !c.is_empty())
            .ok_or_else(|| format("no non-empty gold candidate"))?;
        if self.history.is_empty() {
            return Err(format("history is empty"));
        }
        if self.history.iter().any(|h| h.trim().is_empty()) {
            return Err(format("history contains an empty turn"));
        }
        let n = self.history.len();
        let history = self
            .history
            .into_iter()
            .enumerate()
            .map(|(i, text)| {
                // Counted from the end: the last turn is the user's.
                let speaker = if (n - 1 - i).is_multiple_of(2) { Speaker::User } else { Speaker::SystemAgent };
                Turn { speaker, text }
            })
            .collect();
        Ok(DatasetItem { item_id, persona_facts: self.personality, history, gold_response })
    }
}

/// Streaming reader over a JSONL dataset; ids are `<split>-<index>`.
pub struct DatasetReader<R> {
    lines: io::Lines<R>,
    split: Split,
    index: usize,
    path: PathBuf,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(reader: R, split: Split) -> Self {
        DatasetReader { lines: reader.lines(), split, index: 0, path: PathBuf::from("<memory>") }
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<DatasetItem, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(io_err(&self.path)(e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            let index = self.index;
            self.index += 1;
            let item_id = format!("{}-{index:06}", self.split);
            return Some(
                serde_json::from_str::<RawRecord>(&line)
                    .map_err(|e| CorpusError::Format { index, message: e.to_string() })
                    .and_then(|raw| raw.into_item(item_id, index)),
            );
        }
    }
}

/// `<root>/<split>.jsonl` when `path` is a directory, otherwise `path`.
pub fn dataset_file(path: &Path, split: Split) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{split}.jsonl"))
    } else {
        path.to_owned()
    }
}

/// Dataset root from the environment.
pub fn dataset_root_from_env() -> Result<PathBuf, CorpusError> {
    std::env::var_os(ENV_DATASET_ROOT).map(PathBuf::from).ok_or(CorpusError::NoDatasetRoot)
}

pub fn load_dataset(path: &Path, split: Split) -> Result<DatasetReader<BufReader<File>>, CorpusError> {
    let file_path = dataset_file(path, split);
    let file = File::open(&file_path).map_err(io_err(&file_path))?;
    let mut reader = DatasetReader::new(BufReader::new(file), split);
    reader.path = file_path;
    Ok(reader)
}

/// Items of the bundled fixture.
pub fn fixture_items() -> Vec<DatasetItem> {
    DatasetReader::new(FIXTURE_JSONL.as_bytes(), Split::Test)
        .collect::<Result<_, _>>()
        .expect("bundled fixture is well formed")
}

#[derive(Debug, Deserialize)]
struct NestedDialogue {
    personality: Vec<String>,
    utterances: Vec<NestedUtterance>,
}

#[derive(Debug, Deserialize)]
struct NestedUtterance {
    history: Vec<String>,
    candidates: Vec<String>,
}

/// Convert the nested layout `{"train": [{"personality": [..], "utterances":
/// [{"history": [..], "candidates": [..]}]}], "valid": [..]}` into one
/// `<split>.jsonl` per split under `out_dir`. Returns lines written per split.
pub fn convert_nested(input: &Path, out_dir: &Path) -> Result<Vec<(Split, usize)>, CorpusError> {
    let file = File::open(input).map_err(io_err(input))?;
    let nested: HashMap<String, Vec<NestedDialogue>> = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CorpusError::Format { index: 0, message: e.to_string() })?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut keys: Vec<&String> = nested.keys().collect();
    keys.sort();
    let mut counts = Vec::new();
    for key in keys {
        let split: Split = key.parse().map_err(|message| CorpusError::Format { index: 0, message })?;
        let path = out_dir.join(format!("{split}.jsonl"));
        let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        let mut n = 0;
        for dialogue in &nested[key] {
            for u in &dialogue.utterances {
                let record = RawRecord {
                    personality: dialogue.personality.clone(),
                    history: u.history.clone(),
                    candidates: u.candidates.clone(),
                };
                serde_json::to_writer(&mut out, &record).expect("record serializes");
                out.write_all(b"\n").map_err(io_err(&path))?;
                n += 1;
            }
        }
        out.flush().map_err(io_err(&path))?;
        counts.push((split, n));
    }
    Ok(counts)
}

/// One line of pipeline output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub item_id: String,
    pub persona_id: String,
    pub gold_response: String,
    #[serde(flatten)]
    pub response: GeneratedResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSummary {
    /// Items considered after `limit`.
    pub input: usize,
    /// Items already present in the output file from an earlier run.
    pub resumed: usize,
    pub generated: usize,
    pub failures: Vec<ItemFailure>,
    pub personas: usize,
    pub induction_failures: Vec<InductionFailure>,
}

impl PipelineSummary {
    /// Records present in the output for the considered items.
    pub fn output(&self) -> usize {
        self.resumed + self.generated
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub output: PathBuf,
    pub limit: Option<usize>,
    /// Keep records already in `output` and skip their items.
    pub resume: bool,
    /// Induced schemas are stored per persona under this directory and
    /// reused on later runs.
    pub schema_root: Option<PathBuf>,
    pub induction: InductionConfig,
    pub generation: GenerationSettings,
    pub exec: Exec,
    /// Items processed (and flushed) per round.
    pub chunk_size: usize,
}

impl PipelineConfig {
    pub fn new(mode: Mode, output: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            mode,
            output: output.into(),
            limit: None,
            resume: false,
            schema_root: None,
            induction: InductionConfig::default(),
            generation: GenerationSettings::default(),
            exec: Exec::default(),
            chunk_size: 64,
        }
    }
}

/// Stable persona id from the fact list.
pub fn persona_key(facts: &[String]) -> String {
    format!("persona-{}", &json_digest(facts)[..12])
}

struct PreparedPersona {
    persona: Arc<Persona>,
    index: Option<EmbeddingIndex>,
}

/// Ids already written to `path`. A torn last line from an interrupted run
/// is cut off.
fn completed_ids(path: &Path) -> Result<HashSet<String>, CorpusError> {
    let raw = match fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(HashSet::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    #[derive(Deserialize)]
    struct IdOnly {
        item_id: String,
    }
    let mut ids = HashSet::new();
    let mut good_len = 0;
    for line in raw.split_inclusive('\n') {
        match serde_json::from_str::<IdOnly>(line.trim_end()) {
            Ok(r) if line.ends_with('\n') => {
                ids.insert(r.item_id);
                good_len += line.len();
            }
            _ => break,
        }
    }
    if good_len < raw.len() {
        log::warn!("{}: dropping {} trailing bytes of an incomplete record", path.display(), raw.len() - good_len);
        fs::write(path, &raw[..good_len]).map_err(io_err(path))?;
    }
    Ok(ids)
}

fn prepare_persona(
    facts: &[String],
    config: &PipelineConfig,
    inducer: &Inducer<'_>,
    embedder: &dyn Embedder,
) -> Result<(PreparedPersona, Vec<InductionFailure>), String> {
    let persona_id = persona_key(facts);
    let mut persona = Persona::new(persona_id.clone(), facts.to_vec());
    if config.mode == Mode::Baseline {
        return Ok((PreparedPersona { persona: Arc::new(persona), index: None }, Vec::new()));
    }
    let library = config.schema_root.as_ref().map(|root| SchemaLibrary::new(root.join(&persona_id)));
    if let Some(lib) = library.as_ref().filter(|l| l.exists()) {
        persona.schemas = lib.load().map_err(|e| e.to_string())?;
    }
    let before = persona.schemas.len();
    let (persona, report) = inducer.build_persona_schemas(persona);
    if let Some(lib) = &library {
        if persona.schemas.len() != before || !lib.exists() {
            lib.save(&persona.schemas).map_err(|e| e.to_string())?;
        }
    }
    let index = if persona.schemas.is_empty() {
        None
    } else {
        let built = match &library {
            Some(lib) => EmbeddingIndex::load_or_build(&lib.dir().join("embeddings.json"), &persona, embedder),
            None => EmbeddingIndex::build(&persona, embedder),
        };
        Some(built.map_err(|e| e.to_string())?)
    };
    Ok((PreparedPersona { persona: Arc::new(persona), index }, report.failures))
}

fn generate_item(
    item: &DatasetItem,
    prepared: &PreparedPersona,
    generator: &Generator<'_>,
    mode: Mode,
) -> Result<PipelineRecord, String> {
    let state = DialogueState::new(prepared.persona.clone(), mode).with_turns(item.history.clone());
    let raw = (mode == Mode::Paraphrase).then_some(item.gold_response.as_str());
    let response = generator
        .respond(&state, prepared.index.as_ref(), raw)
        .map_err(|e| e.to_string())?;
    Ok(PipelineRecord {
        item_id: item.item_id.clone(),
        persona_id: prepared.persona.persona_id.clone(),
        gold_response: item.gold_response.clone(),
        response,
    })
}

/// Generate a response for every item and append records to
/// `config.output` in input order. Unparseable items and per-item errors are
/// logged, counted as failures and skipped.
pub fn run_pipeline<I>(
    items: I,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    config: &PipelineConfig,
) -> Result<PipelineSummary, CorpusError>
where
    I: IntoIterator<Item = Result<DatasetItem, CorpusError>>,
{
    let done = if config.resume { completed_ids(&config.output)? } else { HashSet::new() };
    if let Some(parent) = config.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(config.resume)
        .truncate(!config.resume)
        .open(&config.output)
        .map_err(io_err(&config.output))?;
    let mut out = BufWriter::new(file);

    let inducer = Inducer::new(gateway, config.induction.clone())
        .with_generation(config.generation.config.clone())
        .with_exec(config.exec);
    let generator = Generator::new(gateway, embedder).with_settings(config.generation.clone());
    let mut personas: HashMap<String, Result<Arc<PreparedPersona>, String>> = HashMap::new();
    let mut summary = PipelineSummary::default();

    let limit = config.limit.unwrap_or(usize::MAX);
    let mut items = items.into_iter().take(limit).peekable();
    let chunk_size = config.chunk_size.max(1);
    while items.peek().is_some() {
        let mut chunk = Vec::with_capacity(chunk_size);
        for item in items.by_ref().take(chunk_size) {
            summary.input += 1;
            match item {
                Ok(item) if done.contains(&item.item_id) => summary.resumed += 1,
                Ok(item) => chunk.push(item),
                Err(e) => {
                    log::warn!("skipping unreadable item: {e}");
                    let item_id = match &e {
                        CorpusError::Format { index, .. } => format!("#{index}"),
                        _ => "?".to_owned(),
                    };
                    summary.failures.push(ItemFailure { item_id, error: e.to_string() });
                }
            }
        }

        // Phase 1: personas first seen in this chunk.
        let mut fresh: Vec<&[String]> = Vec::new();
        let mut seen = HashSet::new();
        for item in &chunk {
            let key = persona_key(&item.persona_facts);
            if !personas.contains_key(&key) && seen.insert(key) {
                fresh.push(&item.persona_facts);
            }
        }
        let prepared = config.exec.map(&fresh, |facts| prepare_persona(facts, config, &inducer, embedder));
        for (facts, result) in fresh.iter().zip(prepared) {
            let entry = result.map(|(p, failures)| {
                summary.induction_failures.extend(failures);
                Arc::new(p)
            });
            personas.insert(persona_key(facts), entry);
        }

        // Phase 2: items, written in order.
        let records = config.exec.map(&chunk, |item| {
            match &personas[&persona_key(&item.persona_facts)] {
                Ok(prepared) => generate_item(item, prepared, &generator, config.mode),
                Err(e) => Err(format!("persona preparation failed: {e}")),
            }
        });
        for (item, record) in chunk.iter().zip(records) {
            match record {
                Ok(record) => {
                    serde_json::to_writer(&mut out, &record).expect("record serializes");
                    out.write_all(b"\n").map_err(io_err(&config.output))?;
                    summary.generated += 1;
                }
                Err(error) => {
                    log::warn!("item {} failed: {error}", item.item_id);
                    summary.failures.push(ItemFailure { item_id: item.item_id.clone(), error });
                }
            }
        }
        out.flush().map_err(io_err(&config.output))?;
    }
    summary.personas = personas.len();
    Ok(summary)
}

/// Texts from a JSONL file for evaluation. Each line may be a JSON string,
/// an object with `field` (or, by default, the first of `text`, `response`,
/// `gold_response`, `gold`), or a dataset record whose last candidate is
/// used.
pub fn read_texts(path: &Path, field: Option<&str>) -> Result<Vec<String>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut texts = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let index = texts.len();
        let format = |message: String| CorpusError::Format { index, message };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| format(e.to_string()))?;
        let text = match (&value, field) {
            (serde_json::Value::String(s), _) => Some(s.clone()),
            (v, Some(f)) => v.get(f).and_then(|t| t.as_str()).map(str::to_owned),
            (v, None) => ["text", "response", "gold_response", "gold"]
                .iter()
                .find_map(|f| v.get(*f).and_then(|t| t.as_str()))
                .map(str::to_owned)
                .or_else(|| {
                    v.get("candidates")
                        .and_then(|c| c.as_array())
                        .and_then(|c| c.last())
                        .and_then(|t| t.as_str())
                        .map(str::to_owned)
                }),
        };
        texts.push(text.ok_or_else(|| format("no text field".to_owned()))?);
    }
    Ok(texts)
}
