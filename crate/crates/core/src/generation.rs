//! Response generation in three modes.
//!
//! * unconstrained: retrieved habitual facts, dialogue-schema facts and the
//!   history condition a free reply;
//! * paraphrase: the same plus in-context examples and a raw utterance that
//!   the reply must restate;
//! * baseline: persona and history only.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::gateway::templates::{
    render_baseline_prompt, render_paraphrase_prompt, render_unconstrained_prompt, DialogueContext, Line,
    ParaphraseShot, TemplateError,
};
use crate::gateway::{ChatMessage, Gateway, GatewayError, GenerationConfig};
use crate::retrieval::{retrieve, Embedder, EmbeddingIndex, RetrievalError, RetrievalResult, DEFAULT_N_FACTS};
use crate::schema::{EventSchema, Persona};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    SystemAgent,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Turn { speaker: Speaker::User, text: text.into() }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Turn { speaker: Speaker::SystemAgent, text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "uncs", alias = "unconstrained")]
    Unconstrained,
    #[serde(rename = "para", alias = "paraphrase")]
    Paraphrase,
    #[serde(rename = "base", alias = "baseline")]
    Baseline,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Unconstrained, Mode::Paraphrase];

    pub fn short_name(self) -> &'static str {
        match self {
            Mode::Unconstrained => "uncs",
            Mode::Paraphrase => "para",
            Mode::Baseline => "base",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uncs" | "unconstrained" => Ok(Mode::Unconstrained),
            "para" | "paraphrase" => Ok(Mode::Paraphrase),
            "base" | "baseline" => Ok(Mode::Baseline),
            other => Err(format!("unknown mode {other:?} (expected base, uncs or para)")),
        }
    }
}

/// One dialogue in progress.
#[derive(Debug, Clone)]
pub struct DialogueState {
    pub turns: Vec<Turn>,
    pub system_name: String,
    pub user_name: String,
    pub persona: Arc<Persona>,
    /// Facts about the user shown as their background.
    pub user_background: Vec<String>,
    /// Current dialogue schema supplied by the caller, if any.
    pub dialogue_schema: Option<EventSchema>,
    pub mode: Mode,
}

impl DialogueState {
    pub const DEFAULT_SYSTEM_NAME: &'static str = "Agent";
    pub const DEFAULT_USER_NAME: &'static str = "User";

    pub fn new(persona: Arc<Persona>, mode: Mode) -> Self {
        DialogueState {
            turns: Vec::new(),
            system_name: Self::DEFAULT_SYSTEM_NAME.to_owned(),
            user_name: Self::DEFAULT_USER_NAME.to_owned(),
            persona,
            user_background: Vec::new(),
            dialogue_schema: None,
            mode,
        }
    }

    pub fn with_names(mut self, system_name: impl Into<String>, user_name: impl Into<String>) -> Self {
        self.system_name = system_name.into();
        self.user_name = user_name.into();
        self
    }

    pub fn with_turns(mut self, turns: Vec<Turn>) -> Self {
        self.turns = turns;
        self
    }

    pub fn speaker_name(&self, speaker: Speaker) -> &str {
        match speaker {
            Speaker::SystemAgent => &self.system_name,
            Speaker::User => &self.user_name,
        }
    }

    pub fn lines(&self) -> Vec<Line<'_>> {
        self.turns
            .iter()
            .map(|t| Line { speaker: self.speaker_name(t.speaker), text: &t.text })
            .collect()
    }

    /// The latest user turn, if the dialogue is waiting for a reply.
    pub fn pending_user_turn(&self) -> Option<&str> {
        self.turns
            .last()
            .filter(|t| t.speaker == Speaker::User)
            .map(|t| t.text.as_str())
    }
}

/// One in-context paraphrase example: a context, its raw reply and the
/// paraphrased reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseExample {
    pub context: Vec<Turn>,
    pub raw: String,
    pub response: String,
}

/// The three bundled paraphrase examples.
pub fn default_paraphrase_examples() -> Vec<ParaphraseExample> {
    vec![
        ParaphraseExample {
            context: vec![Turn::user("Hi! How are you doing today?")],
            raw: "I am good. I just got back from a run.".into(),
            response: "I'm doing great, thanks! I just got back from my usual morning run. I always \
                       stretch first and then do a loop around the park, so I feel really awake now."
                .into(),
        },
        ParaphraseExample {
            context: vec![
                Turn::user("Do you have any pets?"),
                Turn::system("Yes, I have a cat. Do you?"),
                Turn::user("No, but I would love a dog someday."),
            ],
            raw: "Dogs are great. I volunteer at a shelter.".into(),
            response: "Dogs are the best! I actually volunteer at an animal shelter on weekends. I \
                       usually start by feeding everyone and then take the dogs out for walks, so I \
                       get plenty of dog time."
                .into(),
        },
        ParaphraseExample {
            context: vec![Turn::user("What do you do for a living?")],
            raw: "I am a nurse.".into(),
            response: "I'm a nurse. Most of my shifts start with checking in on my patients and \
                       going over their charts, and it is tiring but really rewarding work."
                .into(),
        },
    ]
}

/// A generated utterance and what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedResponse {
    pub text: String,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalResult>,
    pub prompt_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_input: Option<String>,
    /// The exact messages sent to the model.
    #[serde(skip)]
    pub prompt: Vec<ChatMessage>,
}

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("state is in {actual} mode, expected {expected}")]
    ModeMismatch { expected: Mode, actual: Mode },
    #[error("the last turn must be a user turn")]
    LastTurnNotUser,
    #[error("user utterance is empty")]
    EmptyUtterance,
    #[error("paraphrase mode needs a raw utterance")]
    RawRequired,
    #[error("a raw utterance is only accepted in paraphrase mode")]
    RawNotAllowed,
    #[error("expected {expected} paraphrase examples, got {got}")]
    ExampleCount { expected: usize, got: usize },
    #[error("this mode needs a schema index but none was supplied")]
    MissingIndex,
    #[error("model returned an empty response twice")]
    EmptyGeneration,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    /// Facts taken from the retrieved schema, header excluded.
    pub n_facts: usize,
    /// In-context examples per paraphrase prompt.
    pub k_examples: usize,
    pub config: GenerationConfig,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings { n_facts: DEFAULT_N_FACTS, k_examples: 3, config: GenerationConfig::default() }
    }
}

/// F_R (retrieved header followed by the selected facts) and F_D (the
/// non-episodic facts of the dialogue schema, empty when there is none).
pub fn select_context_facts(
    retrieval: &RetrievalResult,
    dialogue_schema: Option<&EventSchema>,
) -> (Vec<String>, Vec<String>) {
    let f_r = std::iter::once(retrieval.schema_header.clone())
        .chain(retrieval.selected_facts.iter().cloned())
        .collect();
    let f_d = dialogue_schema
        .map(|s| s.non_episodic_facts().map(str::to_owned).collect())
        .unwrap_or_default();
    (f_r, f_d)
}

/// Trim a completion and drop a leading `<name>:` speaker label.
pub fn clean_completion(text: &str, names: &[&str]) -> String {
    let mut out = text.trim();
    for name in names {
        if let Some(rest) = out.strip_prefix(name).and_then(|r| r.strip_prefix(':')) {
            out = rest.trim_start();
            break;
        }
    }
    out.trim().to_owned()
}

/// Produces responses through a gateway, retrieving with `embedder`.
pub struct Generator<'a> {
    gateway: &'a Gateway,
    embedder: &'a dyn Embedder,
    settings: GenerationSettings,
    examples: Vec<ParaphraseExample>,
}

impl<'a> Generator<'a> {
    pub fn new(gateway: &'a Gateway, embedder: &'a dyn Embedder) -> Self {
        Generator {
            gateway,
            embedder,
            settings: GenerationSettings::default(),
            examples: default_paraphrase_examples(),
        }
    }

    pub fn with_settings(mut self, settings: GenerationSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_examples(mut self, examples: Vec<ParaphraseExample>) -> Self {
        self.examples = examples;
        self
    }

    pub fn settings(&self) -> &GenerationSettings {
        &self.settings
    }

    pub fn examples(&self) -> &[ParaphraseExample] {
        &self.examples
    }

    fn check_ready(&self, state: &DialogueState, mode: Mode) -> Result<(), GenerationError> {
        if state.mode != mode {
            return Err(GenerationError::ModeMismatch { expected: mode, actual: state.mode });
        }
        if state.pending_user_turn().is_none() {
            return Err(GenerationError::LastTurnNotUser);
        }
        Ok(())
    }

    fn complete(
        &self,
        state: &DialogueState,
        prompt: Vec<ChatMessage>,
        mode: Mode,
        retrieval: Option<RetrievalResult>,
        raw_input: Option<String>,
    ) -> Result<GeneratedResponse, GenerationError> {
        let config = self
            .settings
            .config
            .clone()
            .with_agent_stops(&state.user_name, &state.system_name);
        let names = [state.system_name.as_str(), state.user_name.as_str()];
        let mut text = String::new();
        for sample in 0..2 {
            text = clean_completion(&self.gateway.complete_sample(&prompt, &config, sample)?, &names);
            if !text.is_empty() {
                break;
            }
        }
        if text.is_empty() {
            return Err(GenerationError::EmptyGeneration);
        }
        Ok(GeneratedResponse {
            text,
            mode,
            retrieval,
            prompt_digest: json_digest(&prompt),
            raw_input,
            prompt,
        })
    }

    fn context<'s>(
        state: &'s DialogueState,
        lines: &'s [Line<'s>],
        f_r: &'s [String],
        f_d: &'s [String],
    ) -> DialogueContext<'s> {
        DialogueContext {
            system_name: &state.system_name,
            user_name: &state.user_name,
            user_background: &state.user_background,
            system_background: &state.persona.facts,
            habitual_facts: f_r,
            dialogue_facts: f_d,
            history: lines,
        }
    }

    pub fn render_unconstrained(&self, state: &DialogueState, retrieval: &RetrievalResult) -> Vec<ChatMessage> {
        let (f_r, f_d) = select_context_facts(retrieval, state.dialogue_schema.as_ref());
        let lines = state.lines();
        render_unconstrained_prompt(&Self::context(state, &lines, &f_r, &f_d))
    }

    pub fn render_paraphrase(
        &self,
        state: &DialogueState,
        retrieval: &RetrievalResult,
        raw: &str,
        examples: &[ParaphraseExample],
    ) -> Result<Vec<ChatMessage>, GenerationError> {
        if examples.len() != self.settings.k_examples {
            return Err(GenerationError::ExampleCount { expected: self.settings.k_examples, got: examples.len() });
        }
        let (f_r, f_d) = select_context_facts(retrieval, state.dialogue_schema.as_ref());
        let lines = state.lines();
        let example_lines: Vec<Vec<Line<'_>>> = examples
            .iter()
            .map(|ex| {
                ex.context
                    .iter()
                    .map(|t| Line { speaker: state.speaker_name(t.speaker), text: &t.text })
                    .collect()
            })
            .collect();
        let shots: Vec<ParaphraseShot<'_>> = examples
            .iter()
            .zip(&example_lines)
            .map(|(ex, context)| ParaphraseShot { context, raw: &ex.raw, response: &ex.response })
            .collect();
        Ok(render_paraphrase_prompt(&Self::context(state, &lines, &f_r, &f_d), &shots, raw)?)
    }

    pub fn render_baseline(&self, state: &DialogueState) -> Vec<ChatMessage> {
        let lines = state.lines();
        render_baseline_prompt(&Self::context(state, &lines, &[], &[]))
    }

    pub fn generate_unconstrained(
        &self,
        state: &DialogueState,
        retrieval: &RetrievalResult,
    ) -> Result<GeneratedResponse, GenerationError> {
        self.check_ready(state, Mode::Unconstrained)?;
        let prompt = self.render_unconstrained(state, retrieval);
        self.complete(state, prompt, Mode::Unconstrained, Some(retrieval.clone()), None)
    }

    pub fn generate_paraphrase(
        &self,
        state: &DialogueState,
        retrieval: &RetrievalResult,
        raw: &str,
        examples: &[ParaphraseExample],
    ) -> Result<GeneratedResponse, GenerationError> {
        self.check_ready(state, Mode::Paraphrase)?;
        if raw.trim().is_empty() {
            return Err(GenerationError::RawRequired);
        }
        let prompt = self.render_paraphrase(state, retrieval, raw, examples)?;
        self.complete(state, prompt, Mode::Paraphrase, Some(retrieval.clone()), Some(raw.to_owned()))
    }

    pub fn generate_baseline(&self, state: &DialogueState) -> Result<GeneratedResponse, GenerationError> {
        self.check_ready(state, Mode::Baseline)?;
        let prompt = self.render_baseline(state);
        self.complete(state, prompt, Mode::Baseline, None, None)
    }

    /// Retrieve on the latest user turn (skipped in baseline mode) and
    /// generate in the state's mode without modifying the history. `index`
    /// may be `None` only in baseline mode.
    pub fn respond(
        &self,
        state: &DialogueState,
        index: Option<&EmbeddingIndex>,
        raw: Option<&str>,
    ) -> Result<GeneratedResponse, GenerationError> {
        let query = state.pending_user_turn().ok_or(GenerationError::LastTurnNotUser)?;
        match (state.mode, raw) {
            (Mode::Paraphrase, None) => return Err(GenerationError::RawRequired),
            (Mode::Unconstrained | Mode::Baseline, Some(_)) => return Err(GenerationError::RawNotAllowed),
            _ => {}
        }
        match state.mode {
            Mode::Baseline => self.generate_baseline(state),
            Mode::Unconstrained => {
                let index = index.ok_or(GenerationError::MissingIndex)?;
                let retrieval = retrieve(index, &state.persona, self.embedder, query, self.settings.n_facts)?;
                self.generate_unconstrained(state, &retrieval)
            }
            Mode::Paraphrase => {
                let raw = raw.expect("checked above");
                if raw.trim().is_empty() {
                    return Err(GenerationError::RawRequired);
                }
                let index = index.ok_or(GenerationError::MissingIndex)?;
                let retrieval = retrieve(index, &state.persona, self.embedder, query, self.settings.n_facts)?;
                let examples = self.examples.get(..self.settings.k_examples).ok_or(GenerationError::ExampleCount {
                    expected: self.settings.k_examples,
                    got: self.examples.len(),
                })?;
                self.generate_paraphrase(state, &retrieval, raw, examples)
            }
        }
    }

    /// Append the user's turn, respond, and append the response. The input
    /// state is left untouched.
    pub fn take_turn(
        &self,
        state: &DialogueState,
        index: Option<&EmbeddingIndex>,
        user_utterance: &str,
        raw: Option<&str>,
    ) -> Result<(DialogueState, GeneratedResponse), GenerationError> {
        if user_utterance.trim().is_empty() {
            return Err(GenerationError::EmptyUtterance);
        }
        let mut next = state.clone();
        next.turns.push(Turn::user(user_utterance));
        let response = self.respond(&next, index, raw)?;
        next.turns.push(Turn::system(response.text.clone()));
        Ok((next, response))
    }
}
