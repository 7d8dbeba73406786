use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::templates::{DIALOGUE_TASK, FACT_LABEL, PASSAGE_LABEL, PASSAGE_TASK, RAW_LABEL, SCHEMA_TASK};
use super::{ChatProvider, CompletionRequest, ProviderError, Role};
use crate::digest::seed_u64;
use crate::schema::{print_schema, EventSchema, Section};

/// Offline provider producing template-shaped pseudo-text.
///
/// Output is a pure function of `(seed, request)`. Schema-induction prompts
/// get a well-formed schema, passage prompts a short first-person story and
/// dialogue prompts a reply that reuses the facts and raw utterance it was
/// given. Replies sometimes carry a speaker label or run on past a stop
/// sequence, as real models do.
#[derive(Debug, Clone)]
pub struct MockProvider {
    seed: u64,
    id: String,
}

impl MockProvider {
    pub fn new(seed: u64) -> Self {
        MockProvider { seed, id: format!("mock:{seed}") }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl ChatProvider for MockProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_u64(format!("{}:{}", self.seed, request.hash()).as_bytes()));
        let system = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .map_or("", |m| m.content.as_str());
        let last = request.messages.last().map_or("", |m| m.content.as_str());
        let text = if system.starts_with(PASSAGE_TASK) {
            passage(&mut rng, last.strip_prefix(FACT_LABEL).unwrap_or(last))
        } else if system.starts_with(SCHEMA_TASK) {
            let passages = request
                .messages
                .iter()
                .rev()
                .find(|m| m.role == Role::User && m.content.starts_with(PASSAGE_LABEL))
                .map_or(last, |m| m.content.as_str());
            schema(&mut rng, passages)
        } else if system.starts_with(DIALOGUE_TASK) {
            dialogue(&mut rng, system, last, &request.config.stop_sequences)
        } else {
            format!("Mock reply {}.", rng.random_range(0..10_000))
        };
        Ok(text)
    }
}

const STOPWORDS: &[&str] = &[
    "about", "after", "also", "always", "because", "been", "being", "from", "have", "into", "just",
    "like", "love", "make", "more", "most", "much", "really", "some", "than", "that", "them",
    "then", "there", "they", "this", "very", "want", "when", "where", "which", "while", "will",
    "with", "would", "your",
];

fn topic_words(text: &str) -> Vec<String> {
    let mut words: Vec<String> = text
        .split(|c: char| !c.is_alphabetic())
        .map(str::to_lowercase)
        .filter(|w| w.chars().count() >= 4 && !STOPWORDS.contains(&w.as_str()))
        .collect();
    words.dedup();
    if words.is_empty() {
        words.push("my routine".to_owned());
    }
    words
}

/// Sentence body without its terminator, with a lowercase first letter
/// unless it starts with "I".
fn clause(sentence: &str) -> String {
    let body = sentence.trim().trim_end_matches(['.', '!', '?']);
    if body.starts_with("I ") || body.starts_with("I'") {
        return body.to_owned();
    }
    let mut chars = body.chars();
    match chars.next() {
        Some(first) => first.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn sentences(text: &str) -> Vec<String> {
    text.split_inclusive(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| s.split_whitespace().count() >= 3)
        .map(str::to_owned)
        .collect()
}

fn fill(template: &str, word: &str) -> String {
    template.replace("{w}", word)
}

const PASSAGE_STEPS: &[&str] = &[
    "Usually it starts with getting ready for {w}.",
    "I set aside some time in the afternoon for {w}.",
    "Most of the time I check that I have everything I need for {w}.",
    "Once I get going, I lose track of time with {w}.",
    "Sometimes a friend joins me, which makes {w} more fun.",
    "Afterwards I tidy up and think about how {w} went.",
    "By the end I feel relaxed and look forward to the next time.",
];

fn passage(rng: &mut ChaCha8Rng, fact: &str) -> String {
    let words = topic_words(fact);
    let mut steps: Vec<&str> = PASSAGE_STEPS.to_vec();
    steps.shuffle(rng);
    let n = rng.random_range(3..=5);
    let mut out = format!("Whenever I can, {}.", clause(fact));
    for step in &steps[..n] {
        out.push(' ');
        out.push_str(&fill(step, words.choose(rng).expect("non-empty")));
    }
    out
}

const SECTION_POOLS: [(Section, &[&str]); 4] = [
    (
        Section::Precondition,
        &["I have free time for {w}.", "I have what I need for {w}.", "I am in the mood for {w}."],
    ),
    (
        Section::StaticCondition,
        &["I am focused on {w}.", "I am somewhere suitable for {w}.", "I enjoy {w}."],
    ),
    (
        Section::Postcondition,
        &["I feel satisfied after {w}.", "I am a bit tired from {w}.", "I know more about {w}."],
    ),
    (
        Section::Goal,
        &["I want to get better at {w}.", "I want to have fun with {w}.", "I want to share {w} with others."],
    ),
];

fn schema(rng: &mut ChaCha8Rng, passages_text: &str) -> String {
    let body: String = passages_text
        .lines()
        .filter(|l| !l.starts_with(PASSAGE_LABEL))
        .collect::<Vec<_>>()
        .join(" ");
    let sents = sentences(&body);
    let words = topic_words(&body);
    let header = sents.first().cloned().unwrap_or_else(|| "I follow my usual routine.".to_owned());

    let mut builder = EventSchema::builder(header.clone());
    for (section, pool) in SECTION_POOLS {
        let n = rng.random_range(1..=2);
        let mut picked: Vec<String> = Vec::new();
        for _ in 0..n {
            let fact = fill(pool.choose(rng).expect("non-empty"), words.choose(rng).expect("non-empty"));
            if !picked.contains(&fact) {
                picked.push(fact);
            }
        }
        builder = builder.facts(section, picked);
    }
    let mut episodes: Vec<String> = Vec::new();
    for s in sents.iter().skip(1) {
        if *s != header && !episodes.contains(s) {
            episodes.push(s.clone());
        }
    }
    if episodes.is_empty() {
        episodes.push(format!("I spend time on {}.", words[0]));
    }
    let schema = builder
        .facts(Section::Episode, episodes)
        .build()
        .expect("mock schema satisfies invariants");
    let text = print_schema(&schema);
    match rng.random_range(0..4) {
        0 => format!("```lisp\n{text}\n```"),
        1 => format!("Here is the schema:\n{text}"),
        _ => text,
    }
}

const OPENERS: &[&str] = &[
    "Oh nice!", "That sounds fun.", "Really?", "Ha, I hear you.", "Interesting.", "No way!",
    "I see.", "That is cool.",
];
const BRIDGES: &[&str] = &["You know,", "Funny enough,", "For what it is worth,", "Honestly,", "Actually,"];
const QUESTIONS: &[&str] = &[
    "What about you?", "How was your day?", "Do you have any hobbies?", "What do you do for fun?",
    "Have you tried that?", "Where are you from?",
];

/// Bullet facts listed under the habitual-experience heading.
fn habitual_facts(system: &str) -> Vec<&str> {
    let Some(start) = system.find("Habitual experiences of") else {
        return Vec::new();
    };
    system[start..]
        .lines()
        .skip(1)
        .take_while(|l| l.starts_with("- "))
        .map(|l| &l[2..])
        .collect()
}

fn dialogue(rng: &mut ChaCha8Rng, system: &str, last: &str, stops: &[String]) -> String {
    let facts = habitual_facts(system);
    let mut parts = vec![OPENERS.choose(rng).expect("non-empty").to_string()];
    if let Some(pos) = last.rfind(RAW_LABEL) {
        let raw = last[pos + RAW_LABEL.len()..].trim();
        parts.push(raw.to_owned());
    }
    let n_facts = facts.len().min(rng.random_range(1..=3));
    for fact in facts.choose_multiple(rng, n_facts) {
        parts.push(format!("{} {}.", BRIDGES.choose(rng).expect("non-empty"), clause(fact)));
    }
    parts.push(QUESTIONS.choose(rng).expect("non-empty").to_string());
    let mut text = parts.join(" ");

    let speaker = |stop: &String| stop.trim_start_matches('\n').trim_end_matches(':').to_owned();
    if let Some(system_stop) = stops.get(1) {
        if rng.random_bool(0.25) {
            text = format!("{}: {text}", speaker(system_stop));
        }
    }
    if let Some(user_stop) = stops.first() {
        if rng.random_bool(0.3) {
            text.push_str(&format!("{user_stop} {}", QUESTIONS.choose(rng).expect("non-empty")));
        }
    }
    text
}
