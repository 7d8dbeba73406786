//! Prompt construction.
//!
//! Every function here is pure. Each system message opens with a task line
//! ([`PASSAGE_TASK`], [`SCHEMA_TASK`], [`DIALOGUE_TASK`]) so that offline
//! providers can recognise what is being asked.

use serde::{Deserialize, Serialize};

use super::ChatMessage;

pub const PASSAGE_TASK: &str = "TASK: GENERIC PASSAGE";
pub const SCHEMA_TASK: &str = "TASK: SCHEMA INDUCTION";
pub const DIALOGUE_TASK: &str = "TASK: DIALOGUE";

/// Label preceding the target fact in a passage prompt.
pub const FACT_LABEL: &str = "Fact: ";
/// Label preceding each passage in a schema prompt.
pub const PASSAGE_LABEL: &str = "Passage";
/// Label preceding the utterance to paraphrase.
pub const RAW_LABEL: &str = "Raw response: ";

const PASSAGE_DEFINITION: &str = "\
A generic passage is a short first-person story describing the typical \
process of a habitual activity: what usually happens, in what order, and why, \
rather than one specific occasion. Given a fact about a person, write a \
generic passage of three to six sentences about the habitual activity the \
fact describes.";

/// Abstract schema template shown to the model.
pub const SCHEMA_TEMPLATE: &str = r#"(schema :header "<sentence describing the overall habitual event>"
        :preconditions ("<what must hold before the event>" ...)
        :static-conditions ("<what holds throughout the event>" ...)
        :postconditions ("<what holds after the event>" ...)
        :goals ("<what participants typically want>" ...)
        :episodes ("<first typical step>" "<next typical step>" ...))"#;

const SCHEMA_INSTRUCTIONS: &str = "\
Read the generic passages and write one event schema capturing the typical \
knowledge about the habitual event they describe, including knowledge that is \
implied but not stated. Every entry is a short first-person sentence in double \
quotes; escape a double quote or backslash with a backslash. Episodes are listed \
in the order they typically happen. Reply with the schema only, using exactly \
this template:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageExample {
    pub fact: String,
    pub passage: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaExample {
    pub passages: Vec<String>,
    pub schema_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("expected {expected} paraphrase examples, got {got}")]
    ExampleCount { expected: usize, got: usize },
}

/// Passage prompt: definition, `examples` as user/assistant exchanges, then
/// the target fact.
pub fn render_passage_prompt(fact: &str, examples: &[PassageExample]) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(format!("{PASSAGE_TASK}\n{PASSAGE_DEFINITION}"))];
    for ex in examples {
        messages.push(ChatMessage::user(format!("{FACT_LABEL}{}", ex.fact)));
        messages.push(ChatMessage::assistant(ex.passage.clone()));
    }
    messages.push(ChatMessage::user(format!("{FACT_LABEL}{fact}")));
    messages
}

fn passages_block(passages: &[String]) -> String {
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{PASSAGE_LABEL} {}:\n{p}", i + 1))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Schema induction prompt: template, in-context examples, then all passages
/// in one final user message.
pub fn render_schema_prompt(
    passages: &[String],
    examples: &[SchemaExample],
) -> Result<Vec<ChatMessage>, TemplateError> {
    if passages.is_empty() {
        return Err(TemplateError::Empty("passages"));
    }
    let mut messages = vec![ChatMessage::system(format!(
        "{SCHEMA_TASK}\n{SCHEMA_INSTRUCTIONS}\n\n{SCHEMA_TEMPLATE}"
    ))];
    for ex in examples {
        messages.push(ChatMessage::user(passages_block(&ex.passages)));
        messages.push(ChatMessage::assistant(ex.schema_text.clone()));
    }
    messages.push(ChatMessage::user(passages_block(passages)));
    Ok(messages)
}

/// Follow-up turn asking the model to fix an unparseable schema.
pub fn render_repair_request(error: &str) -> ChatMessage {
    ChatMessage::user(format!(
        "That schema could not be parsed ({error}). Reply with the corrected schema only, following the template exactly."
    ))
}

/// One line of dialogue history, already attributed to a speaker name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Line<'a> {
    pub speaker: &'a str,
    pub text: &'a str,
}

/// Everything the dialogue prompts are built from.
#[derive(Debug, Clone, Copy)]
pub struct DialogueContext<'a> {
    pub system_name: &'a str,
    pub user_name: &'a str,
    /// Facts about the user (`<background-user>`).
    pub user_background: &'a [String],
    /// Base persona facts of the system agent (`<background-sys>`).
    pub system_background: &'a [String],
    /// F_R: retrieved habitual facts, header first (`<habitual-facts>`).
    pub habitual_facts: &'a [String],
    /// F_D: non-episodic facts of the current dialogue schema.
    pub dialogue_facts: &'a [String],
    pub history: &'a [Line<'a>],
}

/// A rendered in-context paraphrase example.
#[derive(Debug, Clone, Copy)]
pub struct ParaphraseShot<'a> {
    pub context: &'a [Line<'a>],
    pub raw: &'a str,
    pub response: &'a str,
}

fn bullet_block(title: &str, facts: &[String]) -> String {
    let mut out = format!("{title}\n");
    if facts.is_empty() {
        out.push_str("(none)\n");
    }
    for f in facts {
        out.push_str("- ");
        out.push_str(f);
        out.push('\n');
    }
    out
}

fn transcript(lines: &[Line<'_>]) -> String {
    lines
        .iter()
        .map(|l| format!("{}: {}", l.speaker, l.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn backgrounds(ctx: &DialogueContext<'_>) -> String {
    let mut out = bullet_block(&format!("Background about {}:", ctx.user_name), ctx.user_background);
    out.push('\n');
    out.push_str(&bullet_block(
        &format!("Background about {}:", ctx.system_name),
        ctx.system_background,
    ));
    out
}

fn schema_knowledge(ctx: &DialogueContext<'_>) -> String {
    let mut out = bullet_block(
        &format!("Habitual experiences of {}:", ctx.system_name),
        ctx.habitual_facts,
    );
    out.push('\n');
    out.push_str(&bullet_block("Facts about the current conversation:", ctx.dialogue_facts));
    out
}

fn conversation_turn(ctx: &DialogueContext<'_>) -> String {
    let mut out = String::from("Conversation:\n");
    if !ctx.history.is_empty() {
        out.push_str(&transcript(ctx.history));
        out.push('\n');
    }
    out.push_str(ctx.system_name);
    out.push(':');
    out
}

/// `F_R ++ F_D ++ U`: backgrounds, habitual and dialogue facts in the system
/// message, then the transcript.
pub fn render_unconstrained_prompt(ctx: &DialogueContext<'_>) -> Vec<ChatMessage> {
    let system = format!(
        "{DIALOGUE_TASK}\nYou are {sys}, talking with {user}. Write {sys}'s next turn in the \
conversation. Make it engaging and detailed by drawing on {sys}'s habitual experiences \
where they are relevant.\n\n{bg}\n{knowledge}",
        sys = ctx.system_name,
        user = ctx.user_name,
        bg = backgrounds(ctx),
        knowledge = schema_knowledge(ctx),
    );
    vec![ChatMessage::system(system), ChatMessage::user(conversation_turn(ctx))]
}

/// `F_R ++ F_D ++ E ++ U ++ û`: the unconstrained system message, the
/// examples as user/assistant exchanges, then the live conversation followed
/// by the raw utterance.
pub fn render_paraphrase_prompt(
    ctx: &DialogueContext<'_>,
    shots: &[ParaphraseShot<'_>],
    raw: &str,
) -> Result<Vec<ChatMessage>, TemplateError> {
    if raw.trim().is_empty() {
        return Err(TemplateError::Empty("raw utterance"));
    }
    let system = format!(
        "{DIALOGUE_TASK}\nYou are {sys}, talking with {user}. You will be given the conversation \
so far and a raw response for {sys}. Paraphrase the raw response so that it keeps its \
meaning but becomes more interesting and engaging, weaving in {sys}'s habitual experiences \
where they fit. Reply with the paraphrased response only.\n\n{bg}\n{knowledge}",
        sys = ctx.system_name,
        user = ctx.user_name,
        bg = backgrounds(ctx),
        knowledge = schema_knowledge(ctx),
    );
    let mut messages = vec![ChatMessage::system(system)];
    for shot in shots {
        messages.push(ChatMessage::user(format!(
            "Conversation:\n{}\n{RAW_LABEL}{}",
            transcript(shot.context),
            shot.raw
        )));
        messages.push(ChatMessage::assistant(shot.response));
    }
    let mut last = String::from("Conversation:\n");
    if !ctx.history.is_empty() {
        last.push_str(&transcript(ctx.history));
        last.push('\n');
    }
    last.push_str(RAW_LABEL);
    last.push_str(raw);
    messages.push(ChatMessage::user(last));
    Ok(messages)
}

/// Persona and history only; schema knowledge is never included.
pub fn render_baseline_prompt(ctx: &DialogueContext<'_>) -> Vec<ChatMessage> {
    let system = format!(
        "{DIALOGUE_TASK}\nYou are {sys}, talking with {user}. Write {sys}'s next turn in the \
conversation.\n\n{bg}",
        sys = ctx.system_name,
        user = ctx.user_name,
        bg = backgrounds(ctx),
    );
    vec![ChatMessage::system(system), ChatMessage::user(conversation_turn(ctx))]
}

/// All message contents joined in order; used for containment checks and
/// prompt previews.
pub fn flatten(messages: &[ChatMessage]) -> String {
    messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
}
