use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use proptest::prelude::*;

use habitus_core::metrics::{bleu, distinct_n, entr, evaluate_corpus, pairwise_max_similarity, rouge_l, tokens};
use habitus_core::par::Exec;
use habitus_core::retrieval::{retrieve, EmbeddingIndex, HashEmbedder};
use habitus_core::schema::{parse_schema, print_schema, schema_document, EventSchema, Persona, Section};

fn fact_text() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9 \"\\\\():.,!?'\u{e9}\u{65e5}-]{0,30}"
}

fn schema_strategy() -> impl Strategy<Value = EventSchema> {
    (
        fact_text(),
        proptest::collection::vec(proptest::collection::btree_set(fact_text(), 0..5), 5),
    )
        .prop_map(|(header, sections)| {
            let mut b = EventSchema::builder(header);
            for (section, texts) in Section::LISTS.iter().zip(sections) {
                b = b.facts(*section, texts);
            }
            b.build().unwrap()
        })
}

const WORDS: &[&str] = &[
    "bake", "bread", "walk", "dog", "park", "guitar", "band", "truck", "route", "garden", "tomato", "shelter",
    "morning", "night", "coffee", "book", "shift", "patient",
];

fn sentence() -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::sample::select(WORDS), 5..9).prop_map(|w| w.join(" "))
}

fn persona_strategy() -> impl Strategy<Value = Persona> {
    proptest::collection::vec((sentence(), proptest::collection::btree_set(sentence(), 1..7)), 1..6).prop_map(
        |schemas| {
            let mut p = Persona::new("prop", vec!["I exist.".into()]);
            for (i, (header, facts)) in schemas.into_iter().enumerate() {
                let mut b = EventSchema::builder(header);
                for (j, f) in facts.into_iter().enumerate() {
                    b = b.fact(Section::LISTS[j % 5], f);
                }
                p.schemas.push(b.build().unwrap().with_id(format!("prop-{i:03}")));
            }
            p
        },
    )
}

proptest! {
    #[test]
    fn print_then_parse_is_identity(schema in schema_strategy()) {
        let text = print_schema(&schema);
        let parsed = parse_schema(&text).unwrap();
        prop_assert_eq!(&parsed, &schema.clone().with_id(parsed.id().to_owned()));
        prop_assert_eq!(print_schema(&parsed), text);
    }

    #[test]
    fn unbalanced_input_never_parses(schema in schema_strategy(), cut in 1usize..8) {
        let text = print_schema(&schema);
        let truncated: String = text.chars().take(text.chars().count().saturating_sub(cut)).collect();
        prop_assert!(parse_schema(&truncated).is_err());
    }

    #[test]
    fn document_holds_every_fact_once(schema in schema_strategy()) {
        let doc = schema_document(&schema);
        let mut want: Vec<&str> = vec![schema.header()];
        want.extend(schema.facts().map(|f| f.text));
        let got: Vec<&str> = doc.split('\n').collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn fact_ids_are_distinct(schema in schema_strategy()) {
        let total: usize = Section::LISTS.iter().map(|s| schema.section(*s).len()).sum();
        let ids: HashSet<String> = schema.facts().map(|f| f.fact_id.as_str().to_owned()).collect();
        prop_assert_eq!(ids.len(), total);
    }

    #[test]
    fn retrieval_ranks_a_permutation_of_the_schema(persona in persona_strategy(), query in sentence()) {
        let embedder = HashEmbedder::default();
        let index = EmbeddingIndex::build(&persona, &embedder).unwrap();
        let r = retrieve(&index, &persona, &embedder, &query, 5).unwrap();
        let schema = persona.schema(&r.schema_id).unwrap();
        let mut ids: Vec<String> = r.scored_facts.iter().map(|f| f.fact_id.as_str().to_owned()).collect();
        for w in r.scored_facts.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].fact_id < w[1].fact_id));
        }
        ids.sort();
        let mut want: Vec<String> = schema.all_facts().map(|f| f.fact_id.as_str().to_owned()).collect();
        want.sort();
        prop_assert_eq!(ids, want);
        prop_assert_eq!(r.selected_facts.len(), schema.fact_count().min(5));
    }

    #[test]
    fn positive_scaling_keeps_the_ranking(persona in persona_strategy(), query in sentence(), c in 0.01f64..100.0) {
        let embedder = HashEmbedder::default();
        let index = EmbeddingIndex::build(&persona, &embedder).unwrap();
        let a = retrieve(&index, &persona, &embedder, &query, 5).unwrap();
        let b = retrieve(&index.scaled(c), &persona, &embedder, &query, 5).unwrap();
        // Scaling may move a score by an ulp, which can only reorder near-ties.
        if a.schema_id != b.schema_id {
            prop_assert!((a.schema_score - b.schema_score).abs() < 1e-9);
        } else {
            prop_assert_eq!(a.scored_facts.len(), b.scored_facts.len());
            for (x, y) in a.scored_facts.iter().zip(&b.scored_facts) {
                prop_assert!((x.score - y.score).abs() < 1e-9);
                if x.fact_id != y.fact_id {
                    let other = a.scored_facts.iter().find(|f| f.fact_id == y.fact_id).unwrap();
                    prop_assert!((other.score - x.score).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn entr_ignores_token_names(
        seqs in proptest::collection::vec(proptest::collection::vec(0usize..6, 0..12), 1..5),
        shift in 1usize..6,
    ) {
        let names = ["alpha", "beta", "gamma", "delta", "eps", "zeta"];
        let render = |off: usize| -> Vec<String> {
            seqs.iter().map(|s| s.iter().map(|t| names[(t + off) % 6]).collect::<Vec<_>>().join(" ")).collect()
        };
        let (a, b) = (render(0), render(shift));
        match (entr(&a), entr(&b)) {
            (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x.is_err(), y.is_err()),
        }
    }

    #[test]
    fn distinct_n_is_a_percentage(
        texts in proptest::collection::vec(proptest::collection::vec(proptest::sample::select(WORDS), 1..15), 1..6),
        n in 1usize..4,
    ) {
        let texts: Vec<String> = texts.iter().map(|t| t.join(" ")).collect();
        if let Ok(d) = distinct_n(&texts, n) {
            prop_assert!((0.0..=100.0).contains(&d));
        }
        let d1 = distinct_n(&texts, 1).unwrap();
        let all_distinct = texts.iter().all(|t| {
            let toks = tokens(t);
            toks.iter().collect::<HashSet<_>>().len() == toks.len()
        });
        prop_assert_eq!((d1 - 100.0).abs() < 1e-9, all_distinct);
    }

    #[test]
    fn self_similarity_is_maximal(sentences in proptest::collection::vec(sentence(), 1..4)) {
        let text = sentences.join(". ") + ".";
        prop_assert!((pairwise_max_similarity(&text, &text, bleu) - 100.0).abs() < 1e-9);
        prop_assert!((pairwise_max_similarity(&text, &text, rouge_l) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn dropping_a_matching_sentence_never_helps(
        candidate in proptest::collection::vec(sentence(), 2..5),
        extra_gold in proptest::collection::vec(sentence(), 0..3),
        pick in any::<prop::sample::Index>(),
    ) {
        let i = pick.index(candidate.len());
        let mut gold = extra_gold.clone();
        gold.push(candidate[i].clone());
        let gold = gold.join(". ") + ".";
        let full = candidate.join(". ") + ".";
        let mut reduced = candidate.clone();
        reduced.remove(i);
        let reduced = reduced.join(". ") + ".";
        for sim in [bleu as fn(&str, &str) -> f64, rouge_l] {
            prop_assert!(pairwise_max_similarity(&reduced, &gold, sim) <= pairwise_max_similarity(&full, &gold, sim) + 1e-12);
        }
    }
}

#[test]
fn parallel_and_sequential_evaluation_agree() {
    let generated: Vec<String> = (0..40)
        .map(|i| format!("i {} the {} every {} and then i rest. it is fun.", WORDS[i % 18], WORDS[(i * 7) % 18], WORDS[(i * 5) % 18]))
        .collect();
    let gold: Vec<String> = generated.iter().rev().cloned().collect();
    let embedder = HashEmbedder::default();
    let seq = evaluate_corpus(&generated, Some(&gold), Some(&embedder), Exec::Sequential).unwrap();
    let par = evaluate_corpus(&generated, Some(&gold), Some(&embedder), Exec::Parallel).unwrap();
    assert_eq!(seq, par);

    let persona = Arc::new({
        let mut p = Persona::new("q", vec!["x".into()]);
        for i in 0..12 {
            p.schemas.push(
                EventSchema::builder(format!("I {} often.", WORDS[i]))
                    .goal(format!("I like {}.", WORDS[(i + 3) % 18]))
                    .build()
                    .unwrap()
                    .with_id(format!("q-{i:03}")),
            );
        }
        p
    });
    let a = EmbeddingIndex::build_with(&persona, &embedder, None, Exec::Sequential).unwrap();
    let b = EmbeddingIndex::build_with(&persona, &embedder, None, Exec::Parallel).unwrap();
    let dump = |i: &EmbeddingIndex| i.iter().map(|(k, v)| (k.to_owned(), serde_json::to_string(v).unwrap())).collect::<BTreeMap<_, _>>();
    assert_eq!(dump(&a), dump(&b));
}
