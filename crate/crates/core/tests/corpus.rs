use std::collections::{BTreeMap, BTreeSet};

use futuresight_core::corpus::{build_examples, build_idf_table, story_windows, PipelineConfig, Story};
use futuresight_core::tokenizer::Tokenizer;
use proptest::prelude::*;

const WORDS: &[&str] = &["ant", "bee", "cat", "dog", "elk", "fox", "gnu", "hen", "the", "a"];

fn stopwords() -> BTreeSet<String> {
    ["the", "a"].iter().map(|s| s.to_string()).collect()
}

fn sentence_text(words: &[usize]) -> String {
    let mut s: String = words.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" ");
    s.push('.');
    s[..1].to_uppercase() + &s[1..]
}

/// Stories as lists of sentences, each a list of word indices.
fn corpus_strategy(max_stories: usize) -> impl Strategy<Value = Vec<Vec<Vec<usize>>>> {
    prop::collection::vec(
        prop::collection::vec(prop::collection::vec(0..WORDS.len(), 1..6), 1..12),
        1..max_stories,
    )
}

fn stories_of(corpus: &[Vec<Vec<usize>>]) -> Vec<Story> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, sents)| {
            let text = sents.iter().map(|s| sentence_text(s)).collect::<Vec<_>>().join(" ");
            Story::new(format!("s{i}"), text).unwrap()
        })
        .collect()
}

/// Brute-force oracle: document frequency by scanning every sentence.
fn oracle_idf(corpus: &[Vec<Vec<usize>>], word: usize) -> f64 {
    let docs: Vec<&Vec<usize>> = corpus.iter().flatten().collect();
    let df = docs.iter().filter(|d| d.contains(&word)).count();
    (docs.len() as f64 / (1.0 + df as f64)).ln()
}

fn oracle_mean(corpus: &[Vec<Vec<usize>>], sentence: &[usize]) -> Option<f64> {
    let kept: Vec<usize> = sentence.iter().copied().filter(|&w| WORDS[w] != "the" && WORDS[w] != "a").collect();
    (!kept.is_empty()).then(|| kept.iter().map(|&w| oracle_idf(corpus, w)).sum::<f64>() / kept.len() as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn idf_and_mean_idf_match_brute_force(corpus in corpus_strategy(5)) {
        let stories = stories_of(&corpus);
        let table = build_idf_table(&stories, &stopwords()).unwrap();
        prop_assert_eq!(table.doc_count, corpus.iter().map(Vec::len).sum::<usize>());
        for w in 0..WORDS.len() {
            prop_assert!((table.idf(WORDS[w]) - oracle_idf(&corpus, w)).abs() < 1e-12);
        }
        for (story, sents) in stories.iter().zip(&corpus) {
            for (s, raw) in story.sentences.iter().zip(sents) {
                match (table.mean_idf(&s.words), oracle_mean(&corpus, raw)) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                    (a, b) => prop_assert_eq!(a, b),
                }
            }
        }
    }

    #[test]
    fn windows_hold_invariants(corpus in corpus_strategy(6)) {
        let stories = stories_of(&corpus);
        let table = build_idf_table(&stories, &stopwords()).unwrap();
        let cfg = PipelineConfig { context_len: 3, future_window: 3, min_sentences: 6, vocab_size: 300 };
        for (story, raw) in stories.iter().zip(&corpus) {
            match story_windows(story, &cfg, &table) {
                Ok(w) => {
                    prop_assert!(raw.len() >= 6);
                    prop_assert!((1..=3).contains(&w.distance));
                    prop_assert_eq!(&w.future, &story.sentences[3 + w.distance - 1].text);
                    let scores: Vec<Option<f64>> = raw[3..6].iter().map(|s| oracle_mean(&corpus, s)).collect();
                    let best = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let first = scores.iter().position(|s| s.is_some_and(|v| best - v <= 1e-12 * best.abs().max(1.0))).unwrap();
                    prop_assert_eq!(w.distance, first + 1);
                }
                Err(_) => prop_assert!(raw.len() < 6 || raw[3..6].iter().all(|s| oracle_mean(&corpus, s).is_none())),
            }
        }
    }
}

#[test]
fn contexts_count_toward_document_frequency() {
    let stories = vec![
        Story::new("a", "Zebra ran. Cat sat. Cat sat.").unwrap(),
        Story::new("b", "Dog ran. Zebra slept.").unwrap(),
    ];
    let table = build_idf_table(&stories, &BTreeSet::new()).unwrap();
    assert_eq!(table.doc_count, 5);
    assert_eq!(table.df("zebra"), 2);
    assert_eq!(table.df("cat"), 2);
    assert!((table.idf("zebra") - (5.0f64 / 3.0).ln()).abs() < 1e-15);
}

#[test]
fn pipeline_is_deterministic() {
    let text: String = (0..40).map(|i| format!("Story line {} about the {} creature.", i, WORDS[i % 8])).collect::<Vec<_>>().join(" ");
    let stories: Vec<Story> = (0..4).map(|i| Story::new(format!("s{i}"), text.clone()).unwrap()).collect();
    let run = || {
        let table = build_idf_table(&stories, &stopwords()).unwrap();
        let tok = Tokenizer::train(stories.iter().map(|s| s.raw_text.as_str()), 300).unwrap();
        let (ex, skips) = build_examples(&stories, &PipelineConfig::default(), &tok, &table).unwrap();
        let counts: BTreeMap<usize, usize> = ex.iter().fold(BTreeMap::new(), |mut m, e| {
            *m.entry(e.future_distance).or_default() += 1;
            m
        });
        (ex, skips, counts)
    };
    assert_eq!(run(), run());
}
