//! Schema induction from persona facts.
//!
//! Each persona fact is expanded into `n_passages` generic passages, and a
//! single schema is induced from all of them at once. Malformed schema output
//! is sent back to the model with the parse error for a bounded number of
//! repairs.

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::gateway::templates::{
    render_passage_prompt, render_repair_request, render_schema_prompt, PassageExample, SchemaExample,
};
use crate::gateway::{ChatMessage, Gateway, GatewayError, GenerationConfig};
use crate::par::Exec;
use crate::schema::{parse_schema, EventSchema, ParseError, Persona, Provenance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InductionConfig {
    /// Passages sampled per fact.
    pub n_passages: usize,
    /// In-context examples in each passage prompt.
    pub k_passage_examples: usize,
    /// In-context examples in each schema prompt.
    pub k_schema_examples: usize,
    pub max_repair_attempts: usize,
}

impl Default for InductionConfig {
    fn default() -> Self {
        InductionConfig {
            n_passages: 1,
            k_passage_examples: 2,
            k_schema_examples: 1,
            max_repair_attempts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenericPassage {
    /// `<persona fact id>#<sample index>`.
    pub id: String,
    pub text: String,
    /// Id of the persona fact the passage was sampled for.
    pub source_fact: String,
    /// Verbatim text of that fact.
    pub source_text: String,
    pub sample_index: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum InductionError {
    #[error("persona fact is empty")]
    EmptyFact,
    #[error("no passages to induce from")]
    NoPassages,
    #[error("n_passages must be at least 1")]
    NoSamples,
    #[error("{kind} examples requested: {wanted}, available: {available}")]
    NotEnoughExamples { kind: &'static str, wanted: usize, available: usize },
    #[error("model returned an empty completion")]
    EmptyCompletion,
    #[error("schema still malformed after {attempts} attempts: {last_error}")]
    InductionFailed { attempts: usize, last_error: ParseError },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// In-context examples used by the induction prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionExamples {
    pub passages: Vec<PassageExample>,
    pub schemas: Vec<SchemaExample>,
}

const TENNIS_PASSAGE: &str = "On most weekends I head to the local courts to play tennis. \
I pack my racket, a can of balls and a water bottle the night before. \
When I arrive I stretch and warm up with a few easy rallies. \
Then my partner and I play a couple of sets, keeping score as we go. \
Afterwards we talk about the match, and I go home tired but happy.";

const DOG_PASSAGE: &str = "Every morning and evening I take my dog for a walk around the neighbourhood. \
I clip on his leash and grab a few bags before we leave. \
He sniffs every tree while I greet the neighbours we pass. \
At the park I let him run and fetch his ball. \
When we get home I refill his water bowl and give him a treat.";

const BAKING_PASSAGE: &str = "On Sunday mornings I bake a loaf of bread. \
I start by mixing flour, water, yeast and salt into a dough. \
While it rises I clean the kitchen and have a coffee. \
Then I shape the loaf and bake it until the crust is golden. \
The house smells wonderful, and I share slices with my family.";

const TENNIS_SCHEMA: &str = r#"(schema :header "I play tennis on weekends." :preconditions ("I have a tennis racket and balls." "I have a partner to play with." "The weather is good enough to play outside.") :static-conditions ("I am at a tennis court." "I am wearing sports clothes.") :postconditions ("I am tired." "I know who won the match.") :goals ("I want to get exercise." "I want to have fun with my partner." "I want to improve my game.") :episodes ("I pack my tennis gear." "I travel to the courts." "I warm up with easy rallies." "I play a few sets with my partner." "I talk about the match afterwards." "I go home."))"#;

impl Default for InductionExamples {
    fn default() -> Self {
        InductionExamples {
            passages: vec![
                PassageExample { fact: "I like to play tennis.".into(), passage: TENNIS_PASSAGE.into() },
                PassageExample { fact: "I have a dog.".into(), passage: DOG_PASSAGE.into() },
                PassageExample { fact: "I enjoy baking.".into(), passage: BAKING_PASSAGE.into() },
            ],
            schemas: vec![SchemaExample {
                passages: vec![TENNIS_PASSAGE.into()],
                schema_text: TENNIS_SCHEMA.into(),
            }],
        }
    }
}

/// Outcome for a fact whose schema could not be induced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionFailure {
    pub fact_index: usize,
    pub fact_id: String,
    pub fact: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionReport {
    pub persona_id: String,
    /// Facts that already had a schema and were skipped.
    pub skipped: usize,
    pub induced: usize,
    pub failures: Vec<InductionFailure>,
}

/// Runs induction prompts through a [`Gateway`].
#[derive(Debug)]
pub struct Inducer<'g> {
    gateway: &'g Gateway,
    config: InductionConfig,
    generation: GenerationConfig,
    examples: InductionExamples,
    exec: Exec,
}

impl<'g> Inducer<'g> {
    pub fn new(gateway: &'g Gateway, config: InductionConfig) -> Self {
        Inducer {
            gateway,
            config,
            generation: GenerationConfig::default(),
            examples: InductionExamples::default(),
            exec: Exec::default(),
        }
    }

    pub fn with_generation(mut self, generation: GenerationConfig) -> Self {
        self.generation = generation;
        self
    }

    pub fn with_examples(mut self, examples: InductionExamples) -> Self {
        self.examples = examples;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &InductionConfig {
        &self.config
    }

    fn take_examples<'a, T>(&self, pool: &'a [T], wanted: usize, kind: &'static str) -> Result<&'a [T], InductionError> {
        pool.get(..wanted).ok_or(InductionError::NotEnoughExamples {
            kind,
            wanted,
            available: pool.len(),
        })
    }

    /// Sample `n_passages` independent passages for one fact.
    pub fn sample_passages(&self, fact_id: &str, fact: &str) -> Result<Vec<GenericPassage>, InductionError> {
        if fact.trim().is_empty() {
            return Err(InductionError::EmptyFact);
        }
        if self.config.n_passages == 0 {
            return Err(InductionError::NoSamples);
        }
        let examples = self.take_examples(&self.examples.passages, self.config.k_passage_examples, "passage")?;
        let prompt = render_passage_prompt(fact, examples);
        (0..self.config.n_passages)
            .map(|i| {
                let text = self.gateway.complete_sample(&prompt, &self.generation, i as u32)?;
                let text = text.trim();
                if text.is_empty() {
                    return Err(InductionError::EmptyCompletion);
                }
                Ok(GenericPassage {
                    id: format!("{fact_id}#{i}"),
                    text: text.to_owned(),
                    source_fact: fact_id.to_owned(),
                    source_text: fact.to_owned(),
                    sample_index: i,
                })
            })
            .collect()
    }

    /// Induce one schema from all `passages` in a single prompt, repairing
    /// malformed output up to `max_repair_attempts` times.
    pub fn induce_schema(&self, passages: &[GenericPassage]) -> Result<EventSchema, InductionError> {
        let first = passages.first().ok_or(InductionError::NoPassages)?;
        let examples = self.take_examples(&self.examples.schemas, self.config.k_schema_examples, "schema")?;
        let texts: Vec<String> = passages.iter().map(|p| p.text.clone()).collect();
        let mut messages: Vec<ChatMessage> =
            render_schema_prompt(&texts, examples).map_err(|_| InductionError::NoPassages)?;

        let mut attempt = 0;
        loop {
            attempt += 1;
            let output = self.gateway.complete(&messages, &self.generation)?;
            match parse_schema(extract_schema_text(&output)) {
                Ok(schema) => {
                    let source = Provenance {
                        persona_fact_id: first.source_fact.clone(),
                        persona_fact: first.source_text.clone(),
                        passage_ids: passages.iter().map(|p| p.id.clone()).collect(),
                        model_id: self.generation.model_id.clone(),
                        created_at: Utc::now(),
                    };
                    return Ok(schema.with_source(source));
                }
                Err(err) if attempt > self.config.max_repair_attempts => {
                    return Err(InductionError::InductionFailed { attempts: attempt, last_error: err });
                }
                Err(err) => {
                    log::info!("schema parse failed on attempt {attempt}: {err}");
                    let shown = if output.trim().is_empty() { "(no output)" } else { output.as_str() };
                    messages.push(ChatMessage::assistant(shown));
                    messages.push(render_repair_request(&err.to_string()));
                }
            }
        }
    }

    /// Passages then schema for fact `index` of `persona`.
    pub fn induce_fact(&self, persona: &Persona, index: usize) -> Result<EventSchema, InductionError> {
        let fact_id = persona.fact_id(index);
        let passages = self.sample_passages(&fact_id, &persona.facts[index])?;
        Ok(self.induce_schema(&passages)?.with_id(schema_id(&persona.persona_id, index)))
    }

    /// Induce a schema for every fact that does not have one yet. Failures
    /// are collected in the report; schemas stay in persona fact order.
    pub fn build_persona_schemas(&self, persona: Persona) -> (Persona, InductionReport) {
        self.build_persona_schemas_with_progress(persona, |_| {})
    }

    /// Facts of `persona` that still need a schema.
    pub fn pending_facts(persona: &Persona) -> Vec<usize> {
        (0..persona.facts.len()).filter(|&i| !persona.has_schema_for(i)).collect()
    }

    /// Like [`Inducer::build_persona_schemas`], calling `on_fact_done` with the
    /// fact index as each pending fact finishes (in completion order).
    pub fn build_persona_schemas_with_progress(
        &self,
        mut persona: Persona,
        on_fact_done: impl Fn(usize) + Sync + Send,
    ) -> (Persona, InductionReport) {
        let pending = Self::pending_facts(&persona);
        let mut report = InductionReport {
            persona_id: persona.persona_id.clone(),
            skipped: persona.facts.len() - pending.len(),
            ..Default::default()
        };
        let results = self.exec.map(&pending, |&i| {
            let result = self.induce_fact(&persona, i);
            on_fact_done(i);
            result
        });
        for (i, result) in pending.into_iter().zip(results) {
            match result {
                Ok(schema) => {
                    report.induced += 1;
                    persona.schemas.push(schema);
                }
                Err(err) => report.failures.push(InductionFailure {
                    fact_index: i,
                    fact_id: persona.fact_id(i),
                    fact: persona.facts[i].clone(),
                    error: err.to_string(),
                }),
            }
        }
        persona.schemas.sort_by(|a, b| a.id().cmp(b.id()));
        (persona, report)
    }
}

/// Id given to the schema induced from fact `index`.
pub fn schema_id(persona_id: &str, index: usize) -> String {
    format!("{persona_id}-{index:03}")
}

/// Locate the `(schema ...)` form inside a completion, skipping any prose or
/// code fences around it. Falls back to the trimmed completion.
pub fn extract_schema_text(output: &str) -> &str {
    let Some(start) = output.find("(schema") else {
        return output.trim();
    };
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in output[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 {
                    return &output[start..start + offset + 1];
                }
            }
            _ => {}
        }
    }
    output[start..].trim_end()
}
