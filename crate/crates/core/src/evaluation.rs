//! Conditioning diagnostics, the synthetic keyword suite and the three-class
//! human-evaluation kit.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::{IdfTable, Story};
use crate::generation::{create_session, Engine, GenerationBudget, SamplingParams};
use crate::model::{DecoderState, InjectionMode};
use crate::rng::Rng;
use crate::tensor::softmax_in_place;
use crate::text::{split_sentences, word_tokens};
use crate::tokenizer::BOS;
use crate::training::argmax;
use crate::{Error, Result};

/// Continuation positions compared by [`conditioning_sensitivity`].
pub const SENSITIVITY_POSITIONS: usize = 32;

/// Future used for every class-2 item.
pub const FIXED_FUTURE: &str = "The swamp creatures were relentless in their siege.";

fn greedy_continuation(engine: &Engine, prefix: &[u32], future: &str, distance: usize, n: usize) -> Result<Vec<u32>> {
    let mut state = DecoderState::new(&engine.model, engine.condition(future, distance)?)?;
    let logits = state.extend(&engine.model, prefix)?;
    let mut next = logits.row(logits.rows() - 1).to_vec();
    let mut out = Vec::with_capacity(n);
    while out.len() < n && state.len() < engine.model.config().max_seq {
        let id = argmax(&next) as u32;
        out.push(id);
        next = state.extend(&engine.model, &[id])?.row(0).to_vec();
    }
    Ok(out)
}

fn next_token_probs(engine: &Engine, prefix: &[u32], cont: &[u32], future: &str, distance: usize) -> Result<Vec<Vec<f64>>> {
    let mut ids = prefix.to_vec();
    ids.extend_from_slice(&cont[..cont.len().saturating_sub(1)]);
    let cond = engine.condition(future, distance)?;
    let logits = engine.model.decoder_forward(&ids, &cond)?;
    let first = prefix.len() - 1;
    Ok((first..first + cont.len())
        .map(|r| {
            let mut p = logits.row(r).to_vec();
            softmax_in_place(&mut p);
            p
        })
        .collect())
}

fn path_tv(engine: &Engine, prefix: &[u32], lead: &str, other: &str, distance: usize) -> Result<(f64, usize)> {
    let cont = greedy_continuation(engine, prefix, lead, distance, SENSITIVITY_POSITIONS)?;
    if cont.is_empty() {
        return Ok((0.0, 0));
    }
    let p = next_token_probs(engine, prefix, &cont, lead, distance)?;
    let q = next_token_probs(engine, prefix, &cont, other, distance)?;
    let total: f64 = p
        .iter()
        .zip(&q)
        .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).sum::<f64>())
        .sum();
    Ok((total, cont.len()))
}

/// Mean total-variation distance between next-token distributions under two
/// futures, over the first [`SENSITIVITY_POSITIONS`] continuation positions.
/// Both greedy paths are teacher-forced and averaged, which makes the value
/// symmetric in the two futures.
pub fn conditioning_sensitivity(engine: &Engine, context: &str, future_a: &str, future_b: &str, distance: usize) -> Result<f64> {
    let mut prefix = Vec::new();
    prefix.push(BOS);
    prefix.extend(engine.tokenizer.encode(context));
    let (ta, na) = path_tv(engine, &prefix, future_a, future_b, distance)?;
    let (tb, nb) = path_tv(engine, &prefix, future_b, future_a, distance)?;
    let mean = |t: f64, n: usize| if n == 0 { 0.0 } else { t / n as f64 };
    Ok(0.5 * (mean(ta, na) + mean(tb, nb)))
}

/// Best IDF-weighted overlap between any generated sentence and the future,
/// clipped to `[0, 1]`. `None` when the future has no positively weighted
/// non-stopword term.
pub fn realization_score(generated: &str, future: &str, table: &IdfTable) -> Option<f64> {
    let terms = |text: &str| -> BTreeSet<String> { word_tokens(text).into_iter().filter(|w| !table.is_stopword(w)).collect() };
    let future_terms = terms(future);
    let denom: f64 = future_terms.iter().map(|t| table.idf(t)).sum();
    if future_terms.is_empty() || !(denom > 0.0) {
        return None;
    }
    let best = split_sentences(generated)
        .iter()
        .map(|s| {
            let shared: f64 = terms(&s.text).intersection(&future_terms).map(|t| table.idf(t)).sum();
            shared / denom
        })
        .fold(0.0, f64::max);
    Some(best.clamp(0.0, 1.0))
}

// ---- synthetic suite ----------------------------------------------------------

const NAMES: [&str; 8] = ["Ann", "Ben", "Cara", "Dev", "Eli", "Fay", "Gus", "Hana"];

const KEYWORDS: [&str; 24] = [
    "walrus", "trumpet", "lantern", "giraffe", "violin", "comet", "dragon", "pirate",
    "wizard", "robot", "penguin", "tractor", "balloon", "parrot", "unicorn", "submarine",
    "magician", "astronaut", "elephant", "zeppelin", "kangaroo", "octopus", "saxophone", "camel",
];

const CONTEXTS: [[&str; 5]; 4] = [
    [
        "{N} planned a party.",
        "{N} invited many friends.",
        "The house was cleaned early.",
        "Snacks were set on the table.",
        "Everyone waited by the door.",
    ],
    [
        "{N} planned a trip.",
        "{N} packed a small bag.",
        "The car was loaded early.",
        "Maps were set on the seat.",
        "Everyone waited by the road.",
    ],
    [
        "{N} planned a picnic.",
        "{N} baked fresh bread.",
        "The basket was filled early.",
        "Blankets were set on the grass.",
        "Everyone waited by the lake.",
    ],
    [
        "{N} planned a concert.",
        "{N} tuned an old guitar.",
        "The hall was lit early.",
        "Chairs were set on the stage.",
        "Everyone waited by the gate.",
    ],
];

const FILLERS: [[&str; 2]; 4] = [
    ["Then everyone talked for a while.", "Then everyone laughed for a while."],
    ["Later the sun went down slowly.", "Later the wind grew cold slowly."],
    ["Soon the friends felt very happy.", "Soon the friends felt very tired."],
    ["Finally the long day came to an end.", "Finally the long night came to an end."],
];

/// One templated story with a known keyword placement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticStorySpec {
    pub story_id: String,
    pub template_id: usize,
    pub keyword: String,
    pub context_sentences: Vec<String>,
    /// The four sentences after the context; slot `distance - 1` is the future.
    pub window: Vec<String>,
    pub future_sentence: String,
    pub distance: usize,
}

impl SyntheticStorySpec {
    pub fn context(&self) -> String {
        self.context_sentences.join(" ")
    }

    pub fn text(&self) -> String {
        let mut all = self.context_sentences.clone();
        all.extend(self.window.iter().cloned());
        all.join(" ")
    }

    pub fn story(&self) -> Result<Story> {
        Story::new(self.story_id.clone(), self.text())
    }
}

/// Keyword sentence for `keyword`.
pub fn keyword_sentence(keyword: &str) -> String {
    format!("The {keyword} arrived.")
}

/// Keywords the suite draws from.
pub fn synthetic_keywords() -> &'static [&'static str] {
    &KEYWORDS
}

/// `n` templated nine-sentence stories. Context and filler wording depend only
/// on the template and name; the keyword sentence replaces one of four filler slots.
pub fn synthetic_suite(n: usize, seed: u64) -> Vec<SyntheticStorySpec> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let template_id = rng.below(CONTEXTS.len());
            let name = NAMES[rng.below(NAMES.len())];
            let keyword = KEYWORDS[rng.below(KEYWORDS.len())];
            let distance = 1 + rng.below(FILLERS.len());
            let context_sentences = CONTEXTS[template_id].iter().map(|s| s.replace("{N}", name)).collect();
            let future_sentence = keyword_sentence(keyword);
            let window = (0..FILLERS.len())
                .map(|slot| {
                    let variant = FILLERS[slot][template_id % 2];
                    if slot + 1 == distance {
                        future_sentence.clone()
                    } else {
                        variant.into()
                    }
                })
                .collect();
            SyntheticStorySpec {
                story_id: format!("syn-{i:04}"),
                template_id,
                keyword: keyword.into(),
                context_sentences,
                window,
                future_sentence,
                distance,
            }
        })
        .collect()
}

/// Whether `keyword` occurs as a word in `text`.
pub fn keyword_realized(text: &str, keyword: &str) -> bool {
    let k = keyword.to_lowercase();
    word_tokens(text).iter().any(|w| *w == k)
}

/// One conditioned generation probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RealizationProbe {
    pub context: String,
    pub future: String,
    pub distance: usize,
    /// Word looked for in the first `distance` generated sentences.
    pub keyword: String,
}

/// Fraction of probes whose keyword appears within `distance` generated sentences.
pub fn keyword_realization_rate(engine: &Engine, probes: &[RealizationProbe], sampling: &SamplingParams) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, have: 0 });
    }
    let mut hits = 0usize;
    for (i, p) in probes.iter().enumerate() {
        let params = SamplingParams {
            seed: sampling.seed.wrapping_add(i as u64),
            ..sampling.clone()
        };
        let mut s = create_session(engine, &p.context, &p.future, p.distance, params)?;
        let out = s.generate(engine, GenerationBudget::Sentences(p.distance))?;
        hits += usize::from(keyword_realized(&out.text, &p.keyword));
    }
    Ok(hits as f64 / probes.len() as f64)
}

// ---- human evaluation kit -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum EvalClass {
    /// Conditioned on the story's true future.
    TrueFuture = 1,
    /// Conditioned on [`FIXED_FUTURE`].
    FixedFuture = 2,
    /// Unconditioned baseline.
    Baseline = 3,
}

impl EvalClass {
    pub const ALL: [EvalClass; 3] = [EvalClass::TrueFuture, EvalClass::FixedFuture, EvalClass::Baseline];

    fn index(self) -> usize {
        self as usize - 1
    }
}

impl From<EvalClass> for u8 {
    fn from(c: EvalClass) -> u8 {
        c as u8
    }
}

impl TryFrom<u8> for EvalClass {
    type Error = String;

    fn try_from(v: u8) -> core::result::Result<Self, String> {
        match v {
            1 => Ok(EvalClass::TrueFuture),
            2 => Ok(EvalClass::FixedFuture),
            3 => Ok(EvalClass::Baseline),
            other => Err(format!("class label must be 1, 2 or 3, got {other}")),
        }
    }
}

/// A story whose context and true future feed the evaluation set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSource {
    pub context: String,
    pub future: String,
    pub distance: usize,
}

/// Evaluator-facing record: no class information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedItem {
    pub item_id: String,
    pub context: String,
    pub future: String,
    pub distance: usize,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyItem {
    pub item_id: String,
    pub class: EvalClass,
    /// Future the generation was conditioned on (empty for the baseline).
    pub conditioned_on: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerItem {
    pub item_id: String,
    pub label: EvalClass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HumanEvalSet {
    pub blinded: Vec<BlindedItem>,
    pub key: Vec<KeyItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanEvalConfig {
    pub n_per_class: usize,
    pub sentences: usize,
    pub sampling: SamplingParams,
    pub seed: u64,
}

/// Builds a balanced, shuffled three-class set from the first `n_per_class`
/// sources: class 1 uses the true future, class 2 the fixed future, class 3 the
/// unconditioned baseline. `baseline` must be a NONE-mode model of the same shape.
pub fn build_human_eval_set(model: &Engine, baseline: &Engine, sample: &[EvalSource], config: &HumanEvalConfig) -> Result<HumanEvalSet> {
    if model.model.config().injection_mode != InjectionMode::Memory {
        return Err(Error::ModeMismatch(model.model.config().injection_mode));
    }
    let (a, b) = (model.model.config(), baseline.model.config());
    if b.injection_mode != InjectionMode::None
        || (a.vocab_size, a.d_model, a.n_heads, a.n_layers_dec, a.d_ff, a.max_seq)
            != (b.vocab_size, b.d_model, b.n_heads, b.n_layers_dec, b.d_ff, b.max_seq)
    {
        return Err(Error::Invalid("baseline must be a NONE-mode model with the same decoder shape".into()));
    }
    if config.n_per_class == 0 || sample.len() < config.n_per_class {
        return Err(Error::InsufficientSamples {
            need: config.n_per_class.max(1),
            have: sample.len(),
        });
    }
    let mut items = Vec::with_capacity(3 * config.n_per_class);
    for (i, src) in sample[..config.n_per_class].iter().enumerate() {
        for class in EvalClass::ALL {
            let (engine, future, distance) = match class {
                EvalClass::TrueFuture => (model, src.future.as_str(), src.distance),
                EvalClass::FixedFuture => (model, FIXED_FUTURE, src.distance),
                EvalClass::Baseline => (baseline, src.future.as_str(), src.distance),
            };
            let params = SamplingParams {
                seed: config.sampling.seed.wrapping_add((3 * i + class.index()) as u64),
                ..config.sampling.clone()
            };
            let mut s = create_session(engine, &src.context, future, distance, params)?;
            let out = s.generate(engine, GenerationBudget::Sentences(config.sentences))?;
            let conditioned_on = if class == EvalClass::Baseline { String::new() } else { future.into() };
            items.push((src, class, conditioned_on, out.text.trim().into()));
        }
    }
    Rng::seed_from_u64(config.seed).shuffle(&mut items);
    let mut blinded = Vec::with_capacity(items.len());
    let mut key = Vec::with_capacity(items.len());
    for (n, (src, class, conditioned_on, prediction)) in items.into_iter().enumerate() {
        let item_id = format!("item-{:04}", n + 1);
        blinded.push(BlindedItem {
            item_id: item_id.clone(),
            context: src.context.clone(),
            future: src.future.clone(),
            distance: src.distance,
            prediction,
        });
        key.push(KeyItem { item_id, class, conditioned_on });
    }
    Ok(HumanEvalSet { blinded, key })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    fn map2(a: &Self, b: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        ClassMetrics {
            accuracy: f(a.accuracy, b.accuracy),
            precision: f(a.precision, b.precision),
            recall: f(a.recall, b.recall),
            f1: f(a.f1, b.f1),
        }
    }
}

/// Metrics of one evaluator: one block per class plus the macro block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorMetrics {
    pub per_class: [ClassMetrics; 3],
    pub macro_avg: ClassMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanEvalReport {
    pub evaluators: Vec<EvaluatorMetrics>,
    pub mean: EvaluatorMetrics,
    /// Sample standard deviation across evaluators (zero for a single evaluator).
    pub std_dev: EvaluatorMetrics,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Scores one evaluator's answers. Per-class accuracy is the share of that
/// class's items labelled correctly; macro accuracy is overall accuracy; macro
/// precision and recall are class means and macro F1 is their harmonic mean.
pub fn score_evaluator(key: &[KeyItem], answers: &[AnswerItem]) -> Result<EvaluatorMetrics> {
    let truth: BTreeMap<&str, EvalClass> = key.iter().map(|k| (k.item_id.as_str(), k.class)).collect();
    if truth.len() != key.len() {
        return Err(Error::Invalid("duplicate item id in key".into()));
    }
    let mut given: BTreeMap<&str, EvalClass> = BTreeMap::new();
    for a in answers {
        if !truth.contains_key(a.item_id.as_str()) {
            return Err(Error::Invalid(format!("answer for unknown item {}", a.item_id)));
        }
        if given.insert(a.item_id.as_str(), a.label).is_some() {
            return Err(Error::Invalid(format!("duplicate answer for item {}", a.item_id)));
        }
    }
    if given.len() != truth.len() {
        return Err(Error::InsufficientSamples {
            need: truth.len(),
            have: given.len(),
        });
    }
    let mut confusion = [[0usize; 3]; 3];
    for (id, t) in &truth {
        confusion[t.index()][given[id].index()] += 1;
    }
    let mut m = EvaluatorMetrics::default();
    let mut correct = 0;
    for c in 0..3 {
        let tp = confusion[c][c];
        correct += tp;
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = (0..3).map(|r| confusion[r][c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        m.per_class[c] = ClassMetrics {
            accuracy: recall,
            precision,
            recall,
            f1: f1(precision, recall),
        };
    }
    let precision = m.per_class.iter().map(|c| c.precision).sum::<f64>() / 3.0;
    let recall = m.per_class.iter().map(|c| c.recall).sum::<f64>() / 3.0;
    m.macro_avg = ClassMetrics {
        accuracy: ratio(correct, truth.len()),
        precision,
        recall,
        f1: f1(precision, recall),
    };
    Ok(m)
}

/// Scores every evaluator and aggregates mean and sample standard deviation.
pub fn score_human_eval(key: &[KeyItem], evaluators: &[Vec<AnswerItem>]) -> Result<HumanEvalReport> {
    if evaluators.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, have: 0 });
    }
    let scored = evaluators.iter().map(|a| score_evaluator(key, a)).collect::<Result<Vec<_>>>()?;
    let n = scored.len() as f64;
    let combine = |f: &dyn Fn(&EvaluatorMetrics, &EvaluatorMetrics) -> EvaluatorMetrics| {
        scored.iter().fold(EvaluatorMetrics::default(), |acc, m| f(&acc, m))
    };
    let sum = combine(&|acc, m| zip_metrics(acc, m, |a, b| a + b));
    let mean = map_metrics(&sum, |x| x / n);
    let sq = combine(&|acc, m| zip_metrics(acc, &zip_metrics(m, &mean, |a, b| (a - b) * (a - b)), |a, b| a + b));
    let std_dev = if scored.len() > 1 {
        map_metrics(&sq, |x| libm::sqrt(x / (n - 1.0)))
    } else {
        EvaluatorMetrics::default()
    };
    Ok(HumanEvalReport {
        evaluators: scored,
        mean,
        std_dev,
    })
}

fn zip_metrics(a: &EvaluatorMetrics, b: &EvaluatorMetrics, f: impl Fn(f64, f64) -> f64 + Copy) -> EvaluatorMetrics {
    EvaluatorMetrics {
        per_class: [
            ClassMetrics::map2(&a.per_class[0], &b.per_class[0], f),
            ClassMetrics::map2(&a.per_class[1], &b.per_class[1], f),
            ClassMetrics::map2(&a.per_class[2], &b.per_class[2], f),
        ],
        macro_avg: ClassMetrics::map2(&a.macro_avg, &b.macro_avg, f),
    }
}

fn map_metrics(a: &EvaluatorMetrics, f: impl Fn(f64) -> f64 + Copy) -> EvaluatorMetrics {
    zip_metrics(a, a, move |x, _| f(x))
}
