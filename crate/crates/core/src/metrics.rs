//! Automatic diversity and controllability metrics.
//!
//! Diversity: mean length, D-1/D-2 and ENTR over generated responses.
//! Similarity to gold: BLEU, ROUGE-L, METEOR and embedding cosine (ST), each
//! aggregated by the pairwise-max protocol over sentences.
//!
//! All scores except ENTR are percentages.

use std::collections::{HashMap, HashSet};
use std::convert::Infallible;

use serde::{Deserialize, Serialize};

use crate::par::Exec;
use crate::retrieval::{cosine, Embedder, EmbeddingVector, RetrievalError};

pub const TOKENIZER_ID: &str = "lowercase-whitespace-strip-punct";
pub const ENTROPY_BASE: u32 = 2;
pub const METEOR_VARIANT: &str = "exact-match (alpha=0.9, beta=3, gamma=0.5)";
pub const LENGTH_UNIT: &str = "tokens";
pub const ROUGE_BETA: f64 = 1.2;
/// Sentences shorter than this many whitespace words are dropped.
pub const MIN_SENTENCE_WORDS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no responses to evaluate")]
    EmptyCorpus,
    #[error("{generated} generated responses but {gold} gold responses")]
    LengthMismatch { generated: usize, gold: usize },
    #[error("n must be at least 1")]
    InvalidOrder,
    #[error("embedding failed: {0}")]
    Embedding(#[from] RetrievalError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenization {
    pub tokens: Vec<String>,
    pub source: String,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '‘' | '’' | '“' | '”' | '–' | '—' | '…' | '¿' | '¡' | '«' | '»')
}

/// Lowercase, split on whitespace, strip leading and trailing punctuation;
/// tokens that are pure punctuation disappear.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(is_punct).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn tokenize(text: &str) -> Tokenization {
    Tokenization { tokens: tokens(text), source: text.to_owned() }
}

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}

fn distinct_ratio(tokens: &[String], n: usize) -> Option<f64> {
    if tokens.len() < n {
        return None;
    }
    let total = tokens.len() + 1 - n;
    let distinct: HashSet<&[String]> = ngrams(tokens, n).collect();
    Some(100.0 * distinct.len() as f64 / total as f64)
}

fn entropy(tokens: &[String], n: usize) -> f64 {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    for g in ngrams(tokens, n) {
        *counts.entry(g).or_default() += 1;
    }
    let total = (tokens.len() + 1 - n) as f64;
    // Sorted so the float sum does not depend on hash order.
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    c.into_iter()
        .map(|k| {
            let p = k as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

fn response_entr(tokens: &[String]) -> Option<f64> {
    if tokens.len() < 3 {
        return None;
    }
    let product: f64 = (1..=3).map(|n| entropy(tokens, n)).product();
    Some(product.cbrt())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean over responses of the percentage of distinct n-grams. Responses with
/// fewer than `n` tokens are excluded; if none qualify the result is 0.
pub fn distinct_n<S: AsRef<str>>(responses: &[S], n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::InvalidOrder);
    }
    if responses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(mean(responses.iter().filter_map(|r| distinct_ratio(&tokens(r.as_ref()), n))))
}

/// Mean over responses of the geometric mean of the base-2 entropies of the
/// unigram, bigram and trigram distributions. Responses with fewer than three
/// tokens are skipped; if none qualify the result is 0.
pub fn entr<S: AsRef<str>>(responses: &[S]) -> Result<f64, MetricsError> {
    if responses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(mean(responses.iter().filter_map(|r| response_entr(&tokens(r.as_ref())))))
}

/// Split on `.`, `?` and `!`, trim, keep segments of at least five words.
pub fn split_sentences(text: &str) -> Vec<String> {
    text.split(['.', '?', '!'])
        .map(str::trim)
        .filter(|s| s.split_whitespace().count() >= MIN_SENTENCE_WORDS)
        .map(str::to_owned)
        .collect()
}

fn count_ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for g in ngrams(tokens, n) {
        *counts.entry(g).or_default() += 1;
    }
    counts
}

/// Sentence BLEU up to 4-grams with uniform weights and brevity penalty.
/// Orders 2 to 4 use add-one smoothing on both counts.
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    bleu_tokens(&tokens(candidate), &tokens(reference))
}

fn bleu_tokens(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = count_ngrams(c, n);
        let refs = count_ngrams(r, n);
        let matched: usize = cand.iter().map(|(g, k)| (*k).min(refs.get(g).copied().unwrap_or(0))).sum();
        let total = c.len().saturating_sub(n - 1);
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / 4.0;
    }
    let (cl, rl) = (c.len() as f64, r.len() as f64);
    let bp = if cl > rl { 1.0 } else { (1.0 - rl / cl).exp() };
    100.0 * bp * log_sum.exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure with recall weighted by beta = 1.2.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokens(candidate), tokens(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (p, rec) = (lcs / c.len() as f64, lcs / r.len() as f64);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    100.0 * (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Exact-match unigram alignment, left to right over the candidate. Each
/// candidate token takes the reference position that continues the current
/// chunk if possible, otherwise the earliest unused match.
fn align(c: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; r.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in c.iter().enumerate() {
        let continues = pairs
            .last()
            .filter(|&&(pi, _)| pi + 1 == i)
            .map(|&(_, pj)| pj + 1)
            .filter(|&j| j < r.len() && !used[j] && &r[j] == tok);
        let chosen = continues.or_else(|| (0..r.len()).find(|&j| !used[j] && &r[j] == tok));
        if let Some(j) = chosen {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// METEOR with exact matching only: harmonic mean weighted 9:1 towards
/// recall, times one minus a fragmentation penalty of 0.5 * (chunks / m)^3.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokens(candidate), tokens(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let pairs = align(&c, &r);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let (p, rec) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
    let alpha = 0.9;
    let f_mean = p * rec / (alpha * p + (1.0 - alpha) * rec);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    100.0 * f_mean * (1.0 - penalty)
}

/// 100 times the cosine of the two embeddings; 0 when either is empty or
/// has no content.
pub fn st(candidate: &str, reference: &str, embedder: &dyn Embedder) -> Result<f64, RetrievalError> {
    if candidate.trim().is_empty() || reference.trim().is_empty() {
        return Ok(0.0);
    }
    let v = embedder.embed_batch(&[candidate, reference])?;
    Ok(st_score(&v[0], &v[1]))
}

fn st_score(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    cosine(a, b).map(|c| 100.0 * c).unwrap_or(0.0)
}

/// Sentences of both sides, or both whole strings when either side has none.
fn comparison_units(generated: &str, gold: &str) -> (Vec<String>, Vec<String>) {
    let (g, r) = (split_sentences(generated), split_sentences(gold));
    if g.is_empty() || r.is_empty() {
        (vec![generated.to_owned()], vec![gold.to_owned()])
    } else {
        (g, r)
    }
}

/// Mean over gold sentences of the best score against any generated sentence.
pub fn try_pairwise_max_similarity<E>(
    generated: &str,
    gold: &str,
    mut sim: impl FnMut(&str, &str) -> Result<f64, E>,
) -> Result<f64, E> {
    let (gen, refs) = comparison_units(generated, gold);
    let mut total = 0.0;
    for r in &refs {
        let mut best = f64::NEG_INFINITY;
        for g in &gen {
            best = best.max(sim(g, r)?);
        }
        total += best;
    }
    Ok(total / refs.len() as f64)
}

pub fn pairwise_max_similarity(generated: &str, gold: &str, sim: impl Fn(&str, &str) -> f64) -> f64 {
    try_pairwise_max_similarity(generated, gold, |a, b| Ok::<_, Infallible>(sim(a, b)))
        .unwrap_or_else(|e| match e {})
}

/// Pairwise-max ST, embedding every unit once.
pub fn pairwise_max_st(generated: &str, gold: &str, embedder: &dyn Embedder) -> Result<f64, RetrievalError> {
    let (gen, refs) = comparison_units(generated, gold);
    let texts: Vec<&str> = gen.iter().chain(&refs).map(String::as_str).filter(|t| !t.trim().is_empty()).collect();
    let vectors: HashMap<&str, EmbeddingVector> = if texts.is_empty() {
        HashMap::new()
    } else {
        texts.iter().copied().zip(embedder.embed_batch(&texts)?).collect()
    };
    try_pairwise_max_similarity(generated, gold, |a, b| {
        Ok(match (vectors.get(a), vectors.get(b)) {
            (Some(x), Some(y)) => st_score(x, y),
            _ => 0.0,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub length: f64,
    pub d1: f64,
    pub d2: f64,
    pub entr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meteor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub st: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricMetadata {
    pub tokenizer: String,
    pub entropy_base: u32,
    pub meteor_variant: String,
    pub length_unit: String,
    pub rouge_beta: String,
    pub distinct_aggregation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub st_embedder: Option<String>,
}

impl MetricMetadata {
    pub fn new(st_embedder: Option<&str>) -> Self {
        MetricMetadata {
            tokenizer: TOKENIZER_ID.to_owned(),
            entropy_base: ENTROPY_BASE,
            meteor_variant: METEOR_VARIANT.to_owned(),
            length_unit: LENGTH_UNIT.to_owned(),
            rouge_beta: ROUGE_BETA.to_string(),
            distinct_aggregation: "per-response mean".to_owned(),
            st_embedder: st_embedder.map(str::to_owned),
        }
    }
}

/// What `eval` writes: the report plus how it was computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: MetricMetadata,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

struct ResponseScores {
    len: usize,
    d1: Option<f64>,
    d2: Option<f64>,
    entr: Option<f64>,
    sims: Option<[f64; 3]>,
    st: Option<f64>,
}

/// Score a corpus. Similarity fields are filled only when `gold` is given;
/// ST additionally needs an embedder.
pub fn evaluate_corpus<S: AsRef<str> + Sync>(
    generated: &[S],
    gold: Option<&[S]>,
    embedder: Option<&dyn Embedder>,
    exec: Exec,
) -> Result<MetricReport, MetricsError> {
    if generated.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if let Some(gold) = gold {
        if gold.len() != generated.len() {
            return Err(MetricsError::LengthMismatch { generated: generated.len(), gold: gold.len() });
        }
    }
    let items: Vec<usize> = (0..generated.len()).collect();
    let per_response = exec.map(&items, |&i| -> Result<ResponseScores, MetricsError> {
        let text = generated[i].as_ref();
        let toks = tokens(text);
        let reference = gold.map(|g| g[i].as_ref());
        let sims = reference.map(|r| {
            [
                pairwise_max_similarity(text, r, bleu),
                pairwise_max_similarity(text, r, rouge_l),
                pairwise_max_similarity(text, r, meteor),
            ]
        });
        let st = match (reference, embedder) {
            (Some(r), Some(e)) => Some(pairwise_max_st(text, r, e)?),
            _ => None,
        };
        Ok(ResponseScores {
            len: toks.len(),
            d1: distinct_ratio(&toks, 1),
            d2: distinct_ratio(&toks, 2),
            entr: response_entr(&toks),
            sims,
            st,
        })
    });
    let scores = per_response.into_iter().collect::<Result<Vec<_>, _>>()?;
    let sim_mean = |k: usize| gold.map(|_| mean(scores.iter().filter_map(|s| s.sims.map(|v| v[k]))));
    Ok(MetricReport {
        n: scores.len(),
        length: mean(scores.iter().map(|s| s.len as f64)),
        d1: mean(scores.iter().filter_map(|s| s.d1)),
        d2: mean(scores.iter().filter_map(|s| s.d2)),
        entr: mean(scores.iter().filter_map(|s| s.entr)),
        bleu: sim_mean(0),
        rouge_l: sim_mean(1),
        meteor: sim_mean(2),
        st: (gold.is_some() && embedder.is_some()).then(|| mean(scores.iter().filter_map(|s| s.st))),
    })
}
