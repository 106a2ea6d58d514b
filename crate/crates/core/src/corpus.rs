//! Story ingestion, sentence-level IDF statistics and future selection.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::text::{split_sentences, Sentence};
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

/// The stopword list shipped with the crate (plain text, one term per line).
pub const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Parses a plain-text stopword list: one term per line, `#` comments, blank lines ignored.
pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .flat_map(|l| l.chars().flat_map(char::to_lowercase).collect::<String>().split_whitespace().map(ToString::to_string).collect::<Vec<_>>())
        .collect()
}

pub fn default_stopwords() -> BTreeSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub id: String,
    pub raw_text: String,
    pub sentences: Vec<Sentence>,
}

impl Story {
    /// Splits the text into sentences. Fails when the text holds no sentence at all.
    pub fn new(id: impl Into<String>, raw_text: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let raw_text = raw_text.into();
        let sentences = split_sentences(&raw_text);
        if sentences.is_empty() {
            return Err(Error::Invalid(alloc::format!("story {id} has no sentences")));
        }
        Ok(Story { id, raw_text, sentences })
    }
}

/// Document frequencies over sentence-documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdfTable {
    pub doc_count: usize,
    pub df: BTreeMap<String, usize>,
    pub stopwords: BTreeSet<String>,
}

/// Builds the table from every sentence of every story, contexts included.
pub fn build_idf_table(stories: &[Story], stopwords: &BTreeSet<String>) -> Result<IdfTable> {
    let mut table = IdfTable {
        doc_count: 0,
        df: BTreeMap::new(),
        stopwords: stopwords.clone(),
    };
    for story in stories {
        for sentence in &story.sentences {
            table.add_document(&sentence.words);
        }
    }
    if table.doc_count == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(table)
}

impl IdfTable {
    pub fn add_document(&mut self, words: &[String]) {
        self.doc_count += 1;
        let unique: BTreeSet<&String> = words.iter().collect();
        for term in unique {
            *self.df.entry(term.clone()).or_default() += 1;
        }
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    /// `ln(N / (1 + df(term)))`; unseen terms have `df = 0`.
    pub fn idf(&self, term: &str) -> f64 {
        libm::log(self.doc_count as f64 / (1.0 + self.df(term) as f64))
    }

    pub fn is_stopword(&self, term: &str) -> bool {
        self.stopwords.contains(term)
    }

    /// Mean IDF over the non-stopword words; `None` when nothing scoreable remains.
    pub fn mean_idf(&self, words: &[String]) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for w in words.iter().filter(|w| !self.is_stopword(w)) {
            sum += self.idf(w);
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    }
}

pub fn idf(term: &str, table: &IdfTable) -> f64 {
    table.idf(term)
}

pub fn mean_idf(candidate: &Sentence, table: &IdfTable) -> Option<f64> {
    table.mean_idf(&candidate.words)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureSelection {
    pub sentence: Sentence,
    /// 1-based position past the end of the context.
    pub distance: usize,
    pub score: f64,
}

/// Scores closer than this (relative) are ties, so that rounding in the mean
/// cannot overturn the earliest-wins rule.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Picks the candidate with the highest mean IDF; the earliest wins ties.
pub fn select_future(candidates: &[Sentence], table: &IdfTable) -> Option<FutureSelection> {
    select_by_score(candidates, |s| mean_idf(s, table))
}

pub(crate) fn select_by_score<F>(candidates: &[Sentence], mut score: F) -> Option<FutureSelection>
where
    F: FnMut(&Sentence) -> Option<f64>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let Some(s) = score(c) else { continue };
        if best.map_or(true, |(_, b)| s - b > TIE_TOLERANCE * f64::max(1.0, libm::fabs(b))) {
            best = Some((i, s));
        }
    }
    best.map(|(i, score)| FutureSelection {
        sentence: candidates[i].clone(),
        distance: i + 1,
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub context_len: usize,
    pub future_window: usize,
    pub min_sentences: usize,
    pub vocab_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            context_len: 5,
            future_window: 4,
            min_sentences: 9,
            vocab_size: 2000,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_len < 1 || self.future_window < 1 {
            return Err(Error::Invalid("context_len and future_window must be at least 1".into()));
        }
        if self.min_sentences < self.context_len + self.future_window {
            return Err(Error::Invalid(alloc::format!(
                "min_sentences {} is below context_len + future_window = {}",
                self.min_sentences,
                self.context_len + self.future_window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub story_id: String,
    pub context_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub future_ids: Vec<u32>,
    pub future_distance: usize,
}

/// Text windows of one story, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoryWindows {
    pub context: String,
    /// Target text, with a leading space so that `context + target` reads naturally.
    pub target: String,
    pub future: String,
    pub distance: usize,
}

fn join(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&s.text);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    /// Ids of stories with fewer than `min_sentences` sentences.
    pub too_short: Vec<String>,
    /// Ids of stories whose candidates all lacked a mean-IDF score.
    pub unscoreable: Vec<String>,
}

impl SkipReport {
    pub fn total(&self) -> usize {
        self.too_short.len() + self.unscoreable.len()
    }
}

/// Why a story produced no training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    TooShort,
    Unscoreable,
}

/// Context, target window and nominated future of one story.
pub fn story_windows(story: &Story, config: &PipelineConfig, table: &IdfTable) -> core::result::Result<StoryWindows, Skip> {
    if story.sentences.len() < config.min_sentences {
        return Err(Skip::TooShort);
    }
    let lc = config.context_len;
    let window = &story.sentences[lc..lc + config.future_window];
    let selection = select_future(window, table).ok_or(Skip::Unscoreable)?;
    let mut target = String::from(" ");
    target.push_str(&join(window));
    Ok(StoryWindows {
        context: join(&story.sentences[..lc]),
        target,
        future: selection.sentence.text,
        distance: selection.distance,
    })
}

/// One example per story that survives the length filter and has a scoreable future.
/// Output order follows input order.
pub fn build_examples(
    stories: &[Story],
    config: &PipelineConfig,
    tokenizer: &Tokenizer,
    table: &IdfTable,
) -> Result<(Vec<TrainingExample>, SkipReport)> {
    config.validate()?;
    let mut examples = Vec::new();
    let mut report = SkipReport::default();
    for story in stories {
        match story_windows(story, config, table) {
            Err(Skip::TooShort) => report.too_short.push(story.id.clone()),
            Err(Skip::Unscoreable) => report.unscoreable.push(story.id.clone()),
            Ok(w) => examples.push(TrainingExample {
                story_id: story.id.clone(),
                context_ids: tokenizer.encode(&w.context),
                target_ids: tokenizer.encode(&w.target),
                future_ids: tokenizer.encode(&w.future),
                future_distance: w.distance,
            }),
        }
    }
    Ok((examples, report))
}
