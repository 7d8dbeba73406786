//! On-disk state: personas with their schema libraries, and one append-only
//! JSON-lines event log per session.
//!
//! ```text
//! <data_dir>/personas/<persona_id>/persona.json
//! <data_dir>/personas/<persona_id>/schemas/        schema library
//! <data_dir>/personas/<persona_id>/embeddings.json index sidecar
//! <data_dir>/sessions/<session_id>.jsonl
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use habitus_core::gateway::ChatMessage;
use habitus_core::generation::{GeneratedResponse, Mode, Speaker};
use habitus_core::retrieval::RetrievalResult;
use habitus_core::schema::{parse_schema, EventSchema, Persona, PersonaFile, SchemaLibrary};

/// Ids used as file names: 1 to 64 ASCII letters, digits, `-` or `_`.
pub fn valid_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

#[derive(Debug, Clone)]
pub struct PersonaStore {
    root: PathBuf,
}

impl PersonaStore {
    pub fn new(data_dir: &Path) -> Self {
        PersonaStore { root: data_dir.join("personas") }
    }

    pub fn dir(&self, persona_id: &str) -> PathBuf {
        self.root.join(persona_id)
    }

    pub fn index_path(&self, persona_id: &str) -> PathBuf {
        self.dir(persona_id).join("embeddings.json")
    }

    pub fn report_path(&self, persona_id: &str) -> PathBuf {
        self.dir(persona_id).join("induction_report.json")
    }

    pub fn save(&self, persona: &Persona) -> anyhow::Result<()> {
        let dir = self.dir(&persona.persona_id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        SchemaLibrary::new(dir.join("schemas")).save(&persona.schemas)?;
        let file = PersonaFile {
            persona_id: persona.persona_id.clone(),
            facts: persona.facts.clone(),
            schema_dir: Some(PathBuf::from("schemas")),
        };
        file.write(&dir.join("persona.json"))?;
        Ok(())
    }

    pub fn load_all(&self) -> anyhow::Result<Vec<Persona>> {
        let mut personas = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(personas),
            Err(e) => return Err(e).with_context(|| format!("listing {}", self.root.display())),
        };
        for entry in entries {
            let path = entry?.path().join("persona.json");
            if path.is_file() {
                let file = PersonaFile::read(&path)?;
                personas.push(file.load_persona(&path)?);
            }
        }
        personas.sort_by(|a, b| a.persona_id.cmp(&b.persona_id));
        Ok(personas)
    }
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Created {
        session_id: String,
        persona_id: String,
        mode: Mode,
        system_name: String,
        user_name: String,
        #[serde(default)]
        user_background: Vec<String>,
        /// Canonical text of the dialogue schema, if one was supplied.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dialogue_schema: Option<String>,
        at: DateTime<Utc>,
    },
    Turn {
        user_utterance: String,
        response: GeneratedResponse,
        prompt: Vec<ChatMessage>,
        at: DateTime<Utc>,
    },
    ModeChanged {
        mode: Mode,
        at: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_digest: Option<String>,
}

/// Everything known about a session, rebuilt from its log.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub session_id: String,
    pub persona_id: String,
    pub mode: Mode,
    pub system_name: String,
    pub user_name: String,
    pub user_background: Vec<String>,
    pub dialogue_schema: Option<EventSchema>,
    pub created_at: DateTime<Utc>,
    pub last_active: DateTime<Utc>,
    pub turns: Vec<TranscriptTurn>,
    /// Rendered prompt of each system turn, parallel to the system turns.
    pub prompts: Vec<Vec<ChatMessage>>,
}

impl SessionData {
    pub fn apply(&mut self, event: &SessionEvent) {
        match event {
            SessionEvent::Created { .. } => {}
            SessionEvent::Turn { user_utterance, response, prompt, at } => {
                self.turns.push(TranscriptTurn {
                    speaker: Speaker::User,
                    text: user_utterance.clone(),
                    mode: None,
                    raw_input: None,
                    retrieval: None,
                    prompt_digest: None,
                });
                self.turns.push(TranscriptTurn {
                    speaker: Speaker::SystemAgent,
                    text: response.text.clone(),
                    mode: Some(response.mode),
                    raw_input: response.raw_input.clone(),
                    retrieval: response.retrieval.clone(),
                    prompt_digest: Some(response.prompt_digest.clone()),
                });
                self.prompts.push(prompt.clone());
                self.last_active = *at;
            }
            SessionEvent::ModeChanged { mode, at } => {
                self.mode = *mode;
                self.last_active = *at;
            }
        }
    }

    pub fn from_events(events: &[SessionEvent]) -> anyhow::Result<Self> {
        let Some(SessionEvent::Created {
            session_id,
            persona_id,
            mode,
            system_name,
            user_name,
            user_background,
            dialogue_schema,
            at,
        }) = events.first()
        else {
            anyhow::bail!("session log does not start with a created event");
        };
        let dialogue_schema = dialogue_schema.as_deref().map(parse_schema).transpose()?;
        let mut data = SessionData {
            session_id: session_id.clone(),
            persona_id: persona_id.clone(),
            mode: *mode,
            system_name: system_name.clone(),
            user_name: user_name.clone(),
            user_background: user_background.clone(),
            dialogue_schema,
            created_at: *at,
            last_active: *at,
            turns: Vec::new(),
            prompts: Vec::new(),
        };
        for event in &events[1..] {
            data.apply(event);
        }
        Ok(data)
    }
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(data_dir: &Path) -> Self {
        SessionStore { root: data_dir.join("sessions") }
    }

    fn path(&self, session_id: &str) -> PathBuf {
        self.root.join(format!("{session_id}.jsonl"))
    }

    pub fn exists(&self, session_id: &str) -> bool {
        self.path(session_id).exists()
    }

    pub fn append(&self, session_id: &str, event: &SessionEvent) -> anyhow::Result<()> {
        fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        let path = self.path(session_id);
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        file.write_all(&line)?;
        file.sync_data()?;
        Ok(())
    }

    /// Events of one log; an incomplete last line is ignored.
    pub fn read(&self, session_id: &str) -> anyhow::Result<Vec<SessionEvent>> {
        read_events(&self.path(session_id))
    }

    pub fn load_all(&self) -> anyhow::Result<Vec<SessionData>> {
        let mut sessions = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(sessions),
            Err(e) => return Err(e).with_context(|| format!("listing {}", self.root.display())),
        };
        for entry in entries {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                let events = read_events(&path)?;
                match SessionData::from_events(&events) {
                    Ok(data) => sessions.push(data),
                    Err(e) => log::warn!("skipping session log {}: {e}", path.display()),
                }
            }
        }
        sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        Ok(sessions)
    }
}

fn read_events(path: &Path) -> anyhow::Result<Vec<SessionEvent>> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut events = Vec::new();
    let mut lines = raw.split_inclusive('\n').peekable();
    while let Some(line) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(event) => events.push(event),
            Err(_) if lines.peek().is_none() && !line.ends_with('\n') => {
                log::warn!("{}: ignoring incomplete last event", path.display());
            }
            Err(e) => return Err(e).with_context(|| format!("{}: corrupt event", path.display())),
        }
    }
    Ok(events)
}
