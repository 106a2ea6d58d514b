//! Interactive sampling with a swappable future.
//!
//! A [`Session`] owns its decoding cache and random stream; the [`Engine`] (model
//! plus tokenizer) is shared read-only between sessions.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::model::{Conditioning, DecoderState, Model};
use crate::rng::{Rng, RngState};
use crate::text::split_sentences;
use crate::tokenizer::{IncrementalDecoder, Tokenizer, BOS, EOS};
use crate::training::{argmax, distance_ids};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    /// `0` disables top-k truncation.
    pub top_k: usize,
    /// `1.0` disables nucleus truncation.
    pub top_p: f64,
    /// Cap on generated tokens over the whole session.
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Always take the most likely token.
    pub greedy: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.9,
            top_k: 40,
            top_p: 0.95,
            max_new_tokens: 512,
            seed: 7,
            greedy: false,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Invalid("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(Error::Invalid("top_p must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Next-token probabilities after temperature, top-k and top-p, renormalized after
/// each truncation. Greedy mode puts all mass on the first maximal logit.
pub fn sampling_distribution(logits: &[f64], params: &SamplingParams) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    if logits.is_empty() {
        return probs;
    }
    if params.greedy {
        probs[argmax(logits)] = 1.0;
        return probs;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = libm::exp((l - max) / params.temperature);
    }
    normalize(&mut probs);

    // Descending probability; equal probabilities keep id order.
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    if params.top_k > 0 && params.top_k < probs.len() {
        for &i in &order[params.top_k..] {
            probs[i] = 0.0;
        }
        normalize(&mut probs);
    }
    if params.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = 0;
        for &i in &order {
            if probs[i] == 0.0 {
                break;
            }
            cum += probs[i];
            keep += 1;
            if cum >= params.top_p {
                break;
            }
        }
        for &i in &order[keep.max(1)..] {
            probs[i] = 0.0;
        }
        normalize(&mut probs);
    }
    probs
}

fn normalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
}

/// Draws one token id from `logits` under `params`.
pub fn sample_next(logits: &[f64], params: &SamplingParams, rng: &mut Rng) -> u32 {
    let probs = sampling_distribution(logits, params);
    if params.greedy {
        return argmax(&probs) as u32;
    }
    let u = rng.uniform();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i as u32;
        }
    }
    last as u32
}

/// A frozen model with its tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Engine {
    pub model: Model,
    pub tokenizer: Tokenizer,
}

impl Engine {
    pub fn new(model: Model, tokenizer: Tokenizer) -> Result<Self> {
        if tokenizer.vocab_size() > model.config().vocab_size {
            return Err(Error::Invalid(alloc::format!(
                "tokenizer vocabulary {} exceeds model vocabulary {}",
                tokenizer.vocab_size(),
                model.config().vocab_size
            )));
        }
        Ok(Engine { model, tokenizer })
    }

    /// Conditioning for `future` at `distance` under this model's mode.
    pub fn condition(&self, future: &str, distance: usize) -> Result<Conditioning> {
        let future_ids = self.tokenizer.encode(future.trim());
        if future_ids.is_empty() {
            return Err(Error::EmptyFuture);
        }
        self.model
            .condition(distance, &distance_ids(&self.tokenizer, distance), &future_ids)
    }
}

/// One entry of the future-swap history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FutureEntry {
    pub future: String,
    pub distance: usize,
    /// Generated tokens that existed when this future took effect.
    pub token_offset: usize,
    /// Unicode scalar values of generated text that existed when this future took effect.
    pub char_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub context: String,
    pub generated_text: String,
    pub generated_ids: Vec<u32>,
    pub futures: Vec<FutureEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The per-call budget was used up.
    Budget,
    /// The session reached `max_new_tokens`.
    MaxNewTokens,
    /// The sequence reached the model's `max_seq`.
    MaxLength,
    Eos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutput {
    Token { id: u32, piece: String },
    End(StopReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationBudget {
    Tokens(usize),
    Sentences(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub text: String,
    pub tokens: Vec<u32>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    context: String,
    context_ids: Vec<u32>,
    generated_ids: Vec<u32>,
    generated_text: String,
    future: String,
    distance: usize,
    history: Vec<FutureEntry>,
    state: DecoderState,
    next_logits: Vec<f64>,
    sampling: SamplingParams,
    rng: Rng,
    decoder: IncrementalDecoder,
}

/// Opens a session: tokenizes the context, encodes the future and primes the cache.
pub fn create_session(engine: &Engine, context: &str, future: &str, distance: usize, sampling: SamplingParams) -> Result<Session> {
    sampling.validate()?;
    if context.trim().is_empty() {
        return Err(Error::Invalid("context is empty".into()));
    }
    let context_ids = engine.tokenizer.encode(context);
    let max = engine.model.config().max_seq;
    if context_ids.len() + 1 > max {
        return Err(Error::SequenceTooLong {
            len: context_ids.len() + 1,
            max,
        });
    }
    let conditioning = engine.condition(future, distance)?;
    let mut state = DecoderState::new(&engine.model, conditioning)?;
    let mut input = Vec::with_capacity(context_ids.len() + 1);
    input.push(BOS);
    input.extend_from_slice(&context_ids);
    let logits = state.extend(&engine.model, &input)?;
    let rng = Rng::seed_from_u64(sampling.seed);
    Ok(Session {
        context: context.into(),
        context_ids,
        generated_ids: Vec::new(),
        generated_text: String::new(),
        future: future.trim().into(),
        distance,
        history: vec![FutureEntry {
            future: future.trim().into(),
            distance,
            token_offset: 0,
            char_offset: 0,
        }],
        state,
        next_logits: logits.row(logits.rows() - 1).to_vec(),
        sampling,
        rng,
        decoder: IncrementalDecoder::new(),
    })
}

impl Session {
    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn context_ids(&self) -> &[u32] {
        &self.context_ids
    }

    pub fn generated_ids(&self) -> &[u32] {
        &self.generated_ids
    }

    pub fn generated_text(&self) -> &str {
        &self.generated_text
    }

    pub fn future(&self) -> (&str, usize) {
        (&self.future, self.distance)
    }

    pub fn sampling(&self) -> &SamplingParams {
        &self.sampling
    }

    pub fn rng_state(&self) -> RngState {
        self.rng.state()
    }

    /// Logits for the next position, from the cache.
    pub fn next_logits(&self) -> &[f64] {
        &self.next_logits
    }

    /// `[BOS] context generated`: everything the cache has consumed.
    pub fn token_sequence(&self) -> Vec<u32> {
        let mut ids = Vec::with_capacity(1 + self.context_ids.len() + self.generated_ids.len());
        ids.push(BOS);
        ids.extend_from_slice(&self.context_ids);
        ids.extend_from_slice(&self.generated_ids);
        ids
    }

    pub fn conditioning(&self) -> &Conditioning {
        self.state.conditioning()
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            context: self.context.clone(),
            generated_text: self.generated_text.clone(),
            generated_ids: self.generated_ids.clone(),
            futures: self.history.clone(),
        }
    }

    /// Samples and commits one token.
    pub fn step(&mut self, engine: &Engine) -> Result<StepOutput> {
        if self.generated_ids.len() >= self.sampling.max_new_tokens {
            return Ok(StepOutput::End(StopReason::MaxNewTokens));
        }
        if self.state.len() >= engine.model.config().max_seq {
            return Ok(StepOutput::End(StopReason::MaxLength));
        }
        let id = sample_next(&self.next_logits, &self.sampling, &mut self.rng);
        if id == EOS {
            return Ok(StepOutput::End(StopReason::Eos));
        }
        let logits = self.state.extend(&engine.model, &[id])?;
        self.next_logits = logits.row(0).to_vec();
        self.generated_ids.push(id);
        let piece = self.decoder.push(&engine.tokenizer, id);
        self.generated_text.push_str(&piece);
        Ok(StepOutput::Token { id, piece })
    }

    /// Replaces the future and rebuilds the cache over every consumed token.
    /// On error the session is left unchanged.
    pub fn set_future(&mut self, engine: &Engine, future: &str, distance: usize) -> Result<()> {
        let conditioning = engine.condition(future, distance)?;
        let mut state = DecoderState::new(&engine.model, conditioning)?;
        let logits = state.extend(&engine.model, &self.token_sequence())?;
        self.next_logits = logits.row(logits.rows() - 1).to_vec();
        self.state = state;
        self.future = future.trim().into();
        self.distance = distance;
        self.history.push(FutureEntry {
            future: self.future.clone(),
            distance,
            token_offset: self.generated_ids.len(),
            char_offset: self.generated_text.chars().count(),
        });
        Ok(())
    }

    /// Steps until the budget is met or a stop condition fires.
    pub fn generate(&mut self, engine: &Engine, budget: GenerationBudget) -> Result<Generated> {
        self.generate_with(engine, budget, |_, _| {})
    }

    /// Like [`Session::generate`], reporting each committed token.
    pub fn generate_with<F>(&mut self, engine: &Engine, budget: GenerationBudget, mut on_token: F) -> Result<Generated>
    where
        F: FnMut(u32, &str),
    {
        let start_text = self.generated_text.len();
        let start_ids = self.generated_ids.len();
        let stop = loop {
            let produced = self.generated_ids.len() - start_ids;
            let done = match budget {
                GenerationBudget::Tokens(n) => produced >= n,
                GenerationBudget::Sentences(n) => completed_sentences(&self.generated_text[start_text..]) >= n,
            };
            if done {
                break StopReason::Budget;
            }
            match self.step(engine)? {
                StepOutput::Token { id, piece } => on_token(id, &piece),
                StepOutput::End(reason) => break reason,
            }
        };
        Ok(Generated {
            text: self.generated_text[start_text..].into(),
            tokens: self.generated_ids[start_ids..].to_vec(),
            stop,
        })
    }
}

/// Sentences in `text` that are closed by a terminator.
pub fn completed_sentences(text: &str) -> usize {
    let sentences = split_sentences(text);
    let open = sentences.last().is_some_and(|s| {
        let t = s.text.trim_end_matches(['"', '\'', ')', ']', '\u{201d}', '\u{2019}']);
        !t.ends_with(['.', '!', '?', '\u{2026}'])
    });
    sentences.len() - usize::from(open)
}
