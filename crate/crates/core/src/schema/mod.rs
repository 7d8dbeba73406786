//! Habitual event schemas.
//!
//! An [`EventSchema`] is a header sentence plus five sections of facts:
//! preconditions, static conditions, postconditions, goals and the ordered
//! episodes of the event. Schemas have a canonical S-expression surface form
//! (see [`parse_schema`] and [`print_schema`]) and a flattened document form
//! used for embedding ([`schema_document`]).

mod library;
mod parse;
mod print;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use library::{LibraryError, PersonaFile, SchemaIndexEntry, SchemaLibrary};
pub use parse::{parse_schema, ParseError, Position};
pub use print::{print_schema, schema_document};

use crate::digest::sha256_hex;

/// The section a fact belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Header,
    Precondition,
    StaticCondition,
    Postcondition,
    Goal,
    Episode,
}

impl Section {
    /// The five list sections in canonical order.
    pub const LISTS: [Section; 5] = [
        Section::Precondition,
        Section::StaticCondition,
        Section::Postcondition,
        Section::Goal,
        Section::Episode,
    ];

    /// Keyword used in the S-expression form, without the leading colon.
    pub fn keyword(self) -> &'static str {
        match self {
            Section::Header => "header",
            Section::Precondition => "preconditions",
            Section::StaticCondition => "static-conditions",
            Section::Postcondition => "postconditions",
            Section::Goal => "goals",
            Section::Episode => "episodes",
        }
    }

    pub fn from_keyword(keyword: &str) -> Option<Section> {
        match keyword {
            "header" => Some(Section::Header),
            "preconditions" => Some(Section::Precondition),
            "static-conditions" => Some(Section::StaticCondition),
            "postconditions" => Some(Section::Postcondition),
            "goals" => Some(Section::Goal),
            "episodes" => Some(Section::Episode),
            _ => None,
        }
    }

    /// Short tag used inside fact ids.
    fn tag(self) -> &'static str {
        match self {
            Section::Header => "h",
            Section::Precondition => "pre",
            Section::StaticCondition => "st",
            Section::Postcondition => "post",
            Section::Goal => "goal",
            Section::Episode => "ep",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// Stable fact identifier: `<schema id>/<section tag>/<ordinal>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactId(String);

impl FactId {
    pub fn new(schema_id: &str, section: Section, ordinal: usize) -> Self {
        FactId(format!("{schema_id}/{}/{ordinal}", section.tag()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for FactId {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(FactId(s.to_owned()))
    }
}

/// A single sentence of schema knowledge, borrowed from its schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact<'a> {
    pub fact_id: FactId,
    pub section: Section,
    pub text: &'a str,
}

/// Where an induced schema came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub persona_fact_id: String,
    /// Verbatim persona fact the schema was induced from.
    pub persona_fact: String,
    pub passage_ids: Vec<String>,
    pub model_id: String,
    pub created_at: DateTime<Utc>,
}

/// Errors raised when a schema violates its invariants.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("schema header is empty")]
    EmptyHeader,
    #[error("empty fact in section {0}")]
    EmptyFact(Section),
    #[error("duplicate fact in section {section}: {text:?}")]
    DuplicateFact { section: Section, text: String },
}

/// A habitual event schema.
///
/// Equality is structural: two schemas are equal when their header and all
/// five sections match. The id and provenance are metadata and do not take
/// part in comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventSchema {
    id: String,
    header: String,
    preconditions: Vec<String>,
    static_conditions: Vec<String>,
    postconditions: Vec<String>,
    goals: Vec<String>,
    episodes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<Provenance>,
}

impl PartialEq for EventSchema {
    fn eq(&self, other: &Self) -> bool {
        self.header == other.header
            && self.preconditions == other.preconditions
            && self.static_conditions == other.static_conditions
            && self.postconditions == other.postconditions
            && self.goals == other.goals
            && self.episodes == other.episodes
    }
}

impl Eq for EventSchema {}

impl EventSchema {
    /// Start building a schema with the given header.
    pub fn builder(header: impl Into<String>) -> SchemaBuilder {
        SchemaBuilder {
            header: header.into(),
            sections: Default::default(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn header(&self) -> &str {
        &self.header
    }

    pub fn source(&self) -> Option<&Provenance> {
        self.source.as_ref()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_source(mut self, source: Provenance) -> Self {
        self.source = Some(source);
        self
    }

    /// Facts of one list section. Panics on [`Section::Header`].
    pub fn section(&self, section: Section) -> &[String] {
        match section {
            Section::Precondition => &self.preconditions,
            Section::StaticCondition => &self.static_conditions,
            Section::Postcondition => &self.postconditions,
            Section::Goal => &self.goals,
            Section::Episode => &self.episodes,
            Section::Header => panic!("the header is not a list section"),
        }
    }

    pub fn header_fact(&self) -> Fact<'_> {
        Fact {
            fact_id: FactId::new(&self.id, Section::Header, 0),
            section: Section::Header,
            text: &self.header,
        }
    }

    /// All non-header facts in canonical section order.
    pub fn facts(&self) -> impl Iterator<Item = Fact<'_>> + '_ {
        Section::LISTS.into_iter().flat_map(move |section| {
            self.section(section)
                .iter()
                .enumerate()
                .map(move |(ordinal, text)| Fact {
                    fact_id: FactId::new(&self.id, section, ordinal),
                    section,
                    text,
                })
        })
    }

    /// The header fact followed by every other fact.
    pub fn all_facts(&self) -> impl Iterator<Item = Fact<'_>> + '_ {
        std::iter::once(self.header_fact()).chain(self.facts())
    }

    pub fn fact_count(&self) -> usize {
        Section::LISTS.iter().map(|s| self.section(*s).len()).sum()
    }

    /// Preconditions, static conditions, postconditions and goals; everything
    /// except the header and the episodes.
    pub fn non_episodic_facts(&self) -> impl Iterator<Item = &str> + '_ {
        self.preconditions
            .iter()
            .chain(&self.static_conditions)
            .chain(&self.postconditions)
            .chain(&self.goals)
            .map(String::as_str)
    }

    /// Digest of the canonical text; identical for structurally equal schemas.
    pub fn content_digest(&self) -> String {
        sha256_hex(print_schema(self).as_bytes())
    }
}

/// Incremental constructor for [`EventSchema`] that validates on `build`.
#[derive(Debug, Clone)]
pub struct SchemaBuilder {
    header: String,
    sections: [Vec<String>; 5],
}

impl SchemaBuilder {
    fn slot(&mut self, section: Section) -> &mut Vec<String> {
        let idx = Section::LISTS
            .iter()
            .position(|s| *s == section)
            .expect("header has no list slot");
        &mut self.sections[idx]
    }

    pub fn fact(mut self, section: Section, text: impl Into<String>) -> Self {
        self.slot(section).push(text.into());
        self
    }

    pub fn facts<I, S>(mut self, section: Section, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.slot(section).extend(texts.into_iter().map(Into::into));
        self
    }

    pub fn precondition(self, text: impl Into<String>) -> Self {
        self.fact(Section::Precondition, text)
    }

    pub fn static_condition(self, text: impl Into<String>) -> Self {
        self.fact(Section::StaticCondition, text)
    }

    pub fn postcondition(self, text: impl Into<String>) -> Self {
        self.fact(Section::Postcondition, text)
    }

    pub fn goal(self, text: impl Into<String>) -> Self {
        self.fact(Section::Goal, text)
    }

    pub fn episode(self, text: impl Into<String>) -> Self {
        self.fact(Section::Episode, text)
    }

    /// Validate invariants. The id defaults to a prefix of the content digest.
    pub fn build(self) -> Result<EventSchema, SchemaError> {
        if self.header.trim().is_empty() {
            return Err(SchemaError::EmptyHeader);
        }
        for (section, facts) in Section::LISTS.iter().zip(&self.sections) {
            for (i, text) in facts.iter().enumerate() {
                if text.trim().is_empty() {
                    return Err(SchemaError::EmptyFact(*section));
                }
                if facts[..i].contains(text) {
                    return Err(SchemaError::DuplicateFact {
                        section: *section,
                        text: text.clone(),
                    });
                }
            }
        }
        let [preconditions, static_conditions, postconditions, goals, episodes] = self.sections;
        let mut schema = EventSchema {
            id: String::new(),
            header: self.header,
            preconditions,
            static_conditions,
            postconditions,
            goals,
            episodes,
            source: None,
        };
        schema.id = format!("s{}", &schema.content_digest()[..12]);
        Ok(schema)
    }
}

/// A persona: ordered natural-language facts plus the schemas induced from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub persona_id: String,
    pub facts: Vec<String>,
    #[serde(default)]
    pub schemas: Vec<EventSchema>,
}

impl Persona {
    pub fn new(persona_id: impl Into<String>, facts: Vec<String>) -> Self {
        Persona {
            persona_id: persona_id.into(),
            facts,
            schemas: Vec::new(),
        }
    }

    /// Identifier of the `index`-th persona fact.
    pub fn fact_id(&self, index: usize) -> String {
        format!("{}:{index}", self.persona_id)
    }

    pub fn schema(&self, schema_id: &str) -> Option<&EventSchema> {
        self.schemas.iter().find(|s| s.id == schema_id)
    }

    /// Whether a schema induced from fact `index` (with the same text) exists.
    pub fn has_schema_for(&self, index: usize) -> bool {
        let fact_id = self.fact_id(index);
        self.schemas.iter().any(|s| {
            s.source.as_ref().is_some_and(|src| {
                src.persona_fact_id == fact_id && src.persona_fact == self.facts[index]
            })
        })
    }
}
