//! The future-conditioned transformer.
//!
//! Three parts share one [`ParamStore`]:
//!
//! * a bidirectional encoder over `[AGG] distance [SEP] future`, pooled at position 0;
//! * a projection `gelu(W·e + b)` from the pooled vector to one memory vector per
//!   decoder layer;
//! * a pre-norm causal decoder. In [`InjectionMode::Memory`] every layer prepends its
//!   memory vector, passed through that layer's key/value projections, as an extra
//!   attention column visible from every position. The memory column carries no
//!   positional embedding and produces no output row.
//!
//! Every forward op exists twice: on the autodiff tape ([`Graph`]) for training, and
//! as a cached incremental path ([`DecoderState`]) for inference. Both call the same
//! kernels.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::{attention_kernel, AttnSpec, Graph, Var};
use crate::rng::Rng;
use crate::tensor::{self, ParamId, ParamStore, Tensor};
use crate::tokenizer::{AGG, SEP};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InjectionMode {
    Memory,
    Embedding,
    None,
}

impl core::str::FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MEMORY" => Ok(InjectionMode::Memory),
            "EMBEDDING" => Ok(InjectionMode::Embedding),
            "NONE" => Ok(InjectionMode::None),
            other => Err(Error::Invalid(format!("unknown injection mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_enc: usize,
    pub n_heads: usize,
    pub n_layers_dec: usize,
    pub n_layers_enc: usize,
    /// Decoder feed-forward width. The encoder uses `4 * d_enc`.
    pub d_ff: usize,
    pub max_seq: usize,
    pub injection_mode: InjectionMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            d_model: 128,
            d_enc: 128,
            n_heads: 4,
            n_layers_dec: 4,
            n_layers_enc: 2,
            d_ff: 512,
            max_seq: 512,
            injection_mode: InjectionMode::Memory,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.injection_mode != InjectionMode::None && self.d_enc % self.n_heads != 0 {
            return bad(format!("d_enc {} not divisible by n_heads {}", self.d_enc, self.n_heads));
        }
        if self.n_layers_dec == 0 {
            return bad("n_layers_dec must be at least 1".into());
        }
        if self.injection_mode != InjectionMode::None && self.n_layers_enc == 0 {
            return bad("n_layers_enc must be at least 1 when a future is injected".into());
        }
        if self.vocab_size <= AGG as usize || self.max_seq == 0 || self.d_ff == 0 {
            return bad("vocab_size, max_seq and d_ff must be positive (vocab must cover the specials)".into());
        }
        Ok(())
    }

    pub fn uses_encoder(&self) -> bool {
        self.injection_mode != InjectionMode::None
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct StackIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ModelIds {
    decoder: StackIds,
    head_w: ParamId,
    head_b: ParamId,
    encoder: Option<StackIds>,
    proj: Option<(ParamId, ParamId)>,
    emb_in: Option<(ParamId, ParamId)>,
}

struct Init<'a> {
    params: &'a mut ParamStore,
    rng: Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| self.rng.normal() * std).collect();
        self.params.add(name, Tensor::matrix(rows, cols, data)?)
    }

    fn constant(&mut self, name: String, cols: usize, value: f64) -> Result<ParamId> {
        self.params.add(name, Tensor::full(&[1, cols], value))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<(ParamId, ParamId)> {
        let std = gain / libm::sqrt(fan_in as f64);
        let w = self.normal(format!("{prefix}.w"), fan_in, fan_out, std)?;
        let b = self.constant(format!("{prefix}.b"), fan_out, 0.0)?;
        Ok((w, b))
    }

    fn layer(&mut self, prefix: &str, d: usize, ff: usize, residual_gain: f64) -> Result<LayerIds> {
        let ln1_g = self.constant(format!("{prefix}.ln1.g"), d, 1.0)?;
        let ln1_b = self.constant(format!("{prefix}.ln1.b"), d, 0.0)?;
        let (wq, bq) = self.linear(&format!("{prefix}.attn.q"), d, d, 1.0)?;
        // No key bias: it shifts every score in a row equally, memory column included.
        let wk = self.normal(format!("{prefix}.attn.k.w"), d, d, 1.0 / libm::sqrt(d as f64))?;
        let (wv, bv) = self.linear(&format!("{prefix}.attn.v"), d, d, 1.0)?;
        let (wo, bo) = self.linear(&format!("{prefix}.attn.o"), d, d, residual_gain)?;
        let ln2_g = self.constant(format!("{prefix}.ln2.g"), d, 1.0)?;
        let ln2_b = self.constant(format!("{prefix}.ln2.b"), d, 0.0)?;
        let (w1, b1) = self.linear(&format!("{prefix}.ff1"), d, ff, 1.0)?;
        let (w2, b2) = self.linear(&format!("{prefix}.ff2"), ff, d, residual_gain)?;
        Ok(LayerIds {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        })
    }

    fn stack(&mut self, prefix: &str, vocab: usize, max_seq: usize, d: usize, ff: usize, layers: usize) -> Result<StackIds> {
        let tok_emb = self.normal(format!("{prefix}.tok_emb"), vocab, d, 0.1)?;
        let pos_emb = self.normal(format!("{prefix}.pos_emb"), max_seq, d, 0.1)?;
        let residual_gain = 1.0 / libm::sqrt(2.0 * layers as f64);
        let layers = (0..layers)
            .map(|l| self.layer(&format!("{prefix}.{l}"), d, ff, residual_gain))
            .collect::<Result<Vec<_>>>()?;
        let lnf_g = self.constant(format!("{prefix}.ln_f.g"), d, 1.0)?;
        let lnf_b = self.constant(format!("{prefix}.ln_f.b"), d, 0.0)?;
        Ok(StackIds {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
        })
    }
}

/// Position-0 encoder output for one future sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureEmbedding {
    pub vector: Tensor,
    pub distance: usize,
}

/// One conditioning vector per decoder layer (`L × d_model`).
#[derive(Debug, Clone, PartialEq)]
pub struct FutureMemory {
    pub vectors: Tensor,
}

impl FutureMemory {
    pub fn layers(&self) -> usize {
        self.vectors.rows()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        self.vectors.row(l)
    }
}

/// How the decoder is conditioned for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    /// Plain causal decoding (NONE-mode models).
    None,
    Memory(FutureMemory),
    /// Memory-mode model with the memory column removed from every layer.
    MaskedMemory(FutureMemory),
    Embedding(FutureEmbedding),
}

/// Conditioning on the autodiff tape.
#[derive(Debug, Clone)]
pub enum GraphConditioning {
    None,
    /// One `1 × d_model` variable per decoder layer.
    Memory(Vec<Var>),
    Embedding(Var),
}

/// Attention output of one decoder layer together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Residual-stream contribution, `T × d_model`.
    pub output: Tensor,
    /// Per head, `T × (M + T)` where column 0 is the memory slot when present.
    pub weights: Vec<Tensor>,
}

/// Builds the encoder input `[AGG] distance [SEP] future`.
pub fn future_input_ids(distance_ids: &[u32], future_ids: &[u32]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(distance_ids.len() + future_ids.len() + 2);
    ids.push(AGG);
    ids.extend_from_slice(distance_ids);
    ids.push(SEP);
    ids.extend_from_slice(future_ids);
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: ModelIds,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let ids = {
            let mut init = Init {
                params: &mut params,
                rng: Rng::seed_from_u64(config.seed),
            };
            let c = &config;
            let decoder = init.stack("dec", c.vocab_size, c.max_seq, c.d_model, c.d_ff, c.n_layers_dec)?;
            let (head_w, head_b) = init.linear("head", c.d_model, c.vocab_size, 0.2)?;
            let encoder = if c.uses_encoder() {
                Some(init.stack("enc", c.vocab_size, c.max_seq, c.d_enc, 4 * c.d_enc, c.n_layers_enc)?)
            } else {
                None
            };
            let proj = match c.injection_mode {
                InjectionMode::Memory => Some(init.linear("proj", c.d_enc, c.n_layers_dec * c.d_model, 1.0)?),
                _ => None,
            };
            let emb_in = match c.injection_mode {
                InjectionMode::Embedding => Some(init.linear("emb_in", c.d_model + c.d_enc, c.d_model, 1.0)?),
                _ => None,
            };
            ModelIds {
                decoder,
                head_w,
                head_b,
                encoder,
                proj,
                emb_in,
            }
        };
        Ok(Model { config, params, ids })
    }

    /// Reassembles a model from a config and stored parameters (e.g. a checkpoint).
    /// Every expected parameter must be present with the expected shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids() {
            let name = model.params.name(id);
            let other = params
                .id(name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))?;
            let value = params.value(other).clone();
            model.params.set_value(id, value)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter ids of the future projection (`None` outside memory mode).
    pub fn projection_ids(&self) -> Option<(ParamId, ParamId)> {
        self.ids.proj
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn encoder(&self) -> Result<&StackIds> {
        self.ids.encoder.as_ref().ok_or(Error::ModeMismatch(self.config.injection_mode))
    }

    fn check_future(&self, distance_ids: &[u32], future_ids: &[u32]) -> Result<Vec<u32>> {
        if future_ids.is_empty() {
            return Err(Error::EmptyFuture);
        }
        if distance_ids.is_empty() {
            return Err(Error::Invalid("distance encoding is empty".into()));
        }
        let ids = future_input_ids(distance_ids, future_ids);
        self.check_tokens(&ids)?;
        Ok(ids)
    }

    // ---- inference path -------------------------------------------------------

    fn layer_forward(
        &self,
        layer: &LayerIds,
        heads: usize,
        x: &mut Tensor,
        cache: &mut LayerCache,
        memory: Option<&(Vec<f64>, Vec<f64>)>,
        causal: bool,
    ) -> Result<()> {
        let p = &self.params;
        let d = x.cols();
        let h = tensor::layer_norm(x, p.value(layer.ln1_g), p.value(layer.ln1_b))?;
        let q = tensor::linear(&h, p.value(layer.wq), p.value(layer.bq))?;
        let k = tensor::matmul(&h, p.value(layer.wk))?;
        let v = tensor::linear(&h, p.value(layer.wv), p.value(layer.bv))?;
        let offset = cache.k.len() / d;
        cache.k.extend_from_slice(k.data());
        cache.v.extend_from_slice(v.data());
        let spec = AttnSpec {
            heads,
            causal,
            query_offset: offset,
        };
        let mem = memory.map(|(a, b)| (a.as_slice(), b.as_slice()));
        let (attn, _) = attention_kernel(q.data(), &cache.k, &cache.v, mem, d, spec);
        let attn = Tensor::matrix(x.rows(), d, attn)?;
        x.add_assign(&tensor::linear(&attn, p.value(layer.wo), p.value(layer.bo))?)?;
        let h2 = tensor::layer_norm(x, p.value(layer.ln2_g), p.value(layer.ln2_b))?;
        let f = tensor::gelu(&tensor::linear(&h2, p.value(layer.w1), p.value(layer.b1))?);
        x.add_assign(&tensor::linear(&f, p.value(layer.w2), p.value(layer.b2))?)?;
        Ok(())
    }

    fn embed(&self, stack: &StackIds, ids: &[u32], offset: usize) -> Result<Tensor> {
        let mut x = tensor::embedding_lookup(self.params.value(stack.tok_emb), ids)?;
        let positions: Vec<u32> = (offset..offset + ids.len()).map(|p| p as u32).collect();
        let pos = tensor::embedding_lookup(self.params.value(stack.pos_emb), &positions)?;
        x.add_assign(&pos)?;
        Ok(x)
    }

    /// Encodes `[AGG] distance [SEP] future` and returns the position-0 output.
    pub fn encode_future(&self, distance: usize, distance_ids: &[u32], future_ids: &[u32]) -> Result<FutureEmbedding> {
        let enc = self.encoder()?;
        let ids = self.check_future(distance_ids, future_ids)?;
        let mut x = self.embed(enc, &ids, 0)?;
        for layer in &enc.layers {
            let mut cache = LayerCache::default();
            self.layer_forward(layer, self.config.n_heads, &mut x, &mut cache, None, false)?;
        }
        let x = tensor::layer_norm(&x, self.params.value(enc.lnf_g), self.params.value(enc.lnf_b))?;
        Ok(FutureEmbedding {
            vector: Tensor::row_vector(x.row(0).to_vec()),
            distance,
        })
    }

    /// `gelu(e·W + b)` reshaped to one `d_model` vector per decoder layer.
    pub fn project_future(&self, emb: &FutureEmbedding) -> Result<FutureMemory> {
        let (w, b) = self.ids.proj.ok_or(Error::ModeMismatch(self.config.injection_mode))?;
        if !emb.vector.is_finite() {
            return Err(Error::Invalid("future embedding is not finite".into()));
        }
        let z = tensor::gelu(&tensor::linear(&emb.vector, self.params.value(w), self.params.value(b))?);
        Ok(FutureMemory {
            vectors: z.reshape(&[self.config.n_layers_dec, self.config.d_model])?,
        })
    }

    /// Builds the conditioning matching this model's injection mode.
    pub fn condition(&self, distance: usize, distance_ids: &[u32], future_ids: &[u32]) -> Result<Conditioning> {
        match self.config.injection_mode {
            InjectionMode::None => Ok(Conditioning::None),
            InjectionMode::Memory => {
                let emb = self.encode_future(distance, distance_ids, future_ids)?;
                Ok(Conditioning::Memory(self.project_future(&emb)?))
            }
            InjectionMode::Embedding => Ok(Conditioning::Embedding(self.encode_future(distance, distance_ids, future_ids)?)),
        }
    }

    fn check_conditioning(&self, c: &Conditioning) -> Result<()> {
        let ok = matches!(
            (self.config.injection_mode, c),
            (InjectionMode::None, Conditioning::None)
                | (InjectionMode::Memory, Conditioning::Memory(_) | Conditioning::MaskedMemory(_))
                | (InjectionMode::Embedding, Conditioning::Embedding(_))
        );
        if !ok {
            return Err(Error::ModeMismatch(self.config.injection_mode));
        }
        match c {
            Conditioning::Memory(m) | Conditioning::MaskedMemory(m) => {
                if m.vectors.shape() != [self.config.n_layers_dec, self.config.d_model] {
                    return Err(Error::Shape {
                        op: "future_memory",
                        lhs: m.vectors.shape().to_vec(),
                        rhs: vec![self.config.n_layers_dec, self.config.d_model],
                    });
                }
            }
            Conditioning::Embedding(e) => {
                if e.vector.len() != self.config.d_enc {
                    return Err(Error::Shape {
                        op: "future_embedding",
                        lhs: e.vector.shape().to_vec(),
                        rhs: vec![1, self.config.d_enc],
                    });
                }
            }
            Conditioning::None => {}
        }
        Ok(())
    }

    /// Full (uncached) decoder pass: `T × vocab_size` logits.
    pub fn decoder_forward(&self, token_ids: &[u32], conditioning: &Conditioning) -> Result<Tensor> {
        let mut state = DecoderState::new(self, conditioning.clone())?;
        state.extend(self, token_ids)
    }

    /// Attention of decoder layer `layer` applied to `hidden` (the layer input),
    /// with an optional raw memory vector `m_l`.
    pub fn layer_attention(&self, layer: usize, hidden: &Tensor, m_l: Option<&[f64]>) -> Result<AttentionTrace> {
        let ids = self
            .ids
            .decoder
            .layers
            .get(layer)
            .ok_or_else(|| Error::Invalid(format!("no decoder layer {layer}")))?;
        let p = &self.params;
        let d = self.config.d_model;
        let h = tensor::layer_norm(hidden, p.value(ids.ln1_g), p.value(ids.ln1_b))?;
        let q = tensor::linear(&h, p.value(ids.wq), p.value(ids.bq))?;
        let k = tensor::matmul(&h, p.value(ids.wk))?;
        let v = tensor::linear(&h, p.value(ids.wv), p.value(ids.bv))?;
        let mem = match m_l {
            Some(m) => Some(self.memory_kv(ids, m)?),
            None => None,
        };
        let spec = AttnSpec {
            heads: self.config.n_heads,
            causal: true,
            query_offset: 0,
        };
        let (attn, probs) = attention_kernel(
            q.data(),
            k.data(),
            v.data(),
            mem.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
            d,
            spec,
        );
        let t = hidden.rows();
        let cols = t + usize::from(m_l.is_some());
        let weights = probs
            .chunks(t * cols)
            .map(|c| Tensor::matrix(t, cols, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let attn = Tensor::matrix(t, d, attn)?;
        Ok(AttentionTrace {
            output: tensor::linear(&attn, p.value(ids.wo), p.value(ids.bo))?,
            weights,
        })
    }

    fn memory_kv(&self, layer: &LayerIds, m: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = &self.params;
        let m = Tensor::row_vector(m.to_vec());
        let k = tensor::matmul(&m, p.value(layer.wk))?;
        let v = tensor::linear(&m, p.value(layer.wv), p.value(layer.bv))?;
        Ok((k.into_data(), v.into_data()))
    }

    // ---- autodiff path ----------------------------------------------------------

    fn graph_layer(
        &self,
        g: &mut Graph<'_>,
        layer: &LayerIds,
        x: Var,
        memory: Option<Var>,
        causal: bool,
    ) -> Result<Var> {
        let p = |g: &mut Graph<'_>, id| g.param(id);
        let (ln1_g, ln1_b) = (p(g, layer.ln1_g), p(g, layer.ln1_b));
        let h = g.layer_norm(x, ln1_g, ln1_b)?;
        let (wq, bq, wk, wv, bv) = (p(g, layer.wq), p(g, layer.bq), p(g, layer.wk), p(g, layer.wv), p(g, layer.bv));
        let q = g.linear(h, wq, bq)?;
        let k = g.matmul(h, wk)?;
        let v = g.linear(h, wv, bv)?;
        let mem = match memory {
            Some(m) => Some((g.matmul(m, wk)?, g.linear(m, wv, bv)?)),
            None => None,
        };
        let spec = AttnSpec {
            heads: self.config.n_heads,
            causal,
            query_offset: 0,
        };
        let a = g.attention(q, k, v, mem, spec)?;
        let (wo, bo) = (p(g, layer.wo), p(g, layer.bo));
        let o = g.linear(a, wo, bo)?;
        let x = g.add(x, o)?;
        let (ln2_g, ln2_b) = (p(g, layer.ln2_g), p(g, layer.ln2_b));
        let h2 = g.layer_norm(x, ln2_g, ln2_b)?;
        let (w1, b1, w2, b2) = (p(g, layer.w1), p(g, layer.b1), p(g, layer.w2), p(g, layer.b2));
        let f = g.linear(h2, w1, b1)?;
        let f = g.gelu(f)?;
        let f = g.linear(f, w2, b2)?;
        g.add(x, f)
    }

    fn graph_embed(&self, g: &mut Graph<'_>, stack: &StackIds, ids: &[u32]) -> Result<Var> {
        let tok = g.param(stack.tok_emb);
        let pos = g.param(stack.pos_emb);
        let x = g.embedding(tok, ids)?;
        let positions: Vec<u32> = (0..ids.len() as u32).collect();
        let pe = g.embedding(pos, &positions)?;
        g.add(x, pe)
    }

    /// Encoder on the tape; returns the `1 × d_enc` position-0 output.
    pub fn encode_future_graph(&self, g: &mut Graph<'_>, distance_ids: &[u32], future_ids: &[u32]) -> Result<Var> {
        let enc = self.encoder()?;
        let ids = self.check_future(distance_ids, future_ids)?;
        let mut x = self.graph_embed(g, enc, &ids)?;
        for layer in &enc.layers {
            x = self.graph_layer(g, layer, x, None, false)?;
        }
        let (lg, lb) = (g.param(enc.lnf_g), g.param(enc.lnf_b));
        let x = g.layer_norm(x, lg, lb)?;
        g.select_row(x, 0)
    }

    /// Projection on the tape; one `1 × d_model` variable per decoder layer.
    pub fn project_future_graph(&self, g: &mut Graph<'_>, emb: Var) -> Result<Vec<Var>> {
        let (w, b) = self.ids.proj.ok_or(Error::ModeMismatch(self.config.injection_mode))?;
        let (w, b) = (g.param(w), g.param(b));
        let z = g.linear(emb, w, b)?;
        let z = g.gelu(z)?;
        let z = g.reshape(z, &[self.config.n_layers_dec, self.config.d_model])?;
        (0..self.config.n_layers_dec).map(|l| g.select_row(z, l)).collect()
    }

    /// Encoder and projection (or embedding) for this model's mode, on the tape.
    pub fn condition_graph(&self, g: &mut Graph<'_>, distance_ids: &[u32], future_ids: &[u32]) -> Result<GraphConditioning> {
        match self.config.injection_mode {
            InjectionMode::None => Ok(GraphConditioning::None),
            InjectionMode::Memory => {
                let e = self.encode_future_graph(g, distance_ids, future_ids)?;
                Ok(GraphConditioning::Memory(self.project_future_graph(g, e)?))
            }
            InjectionMode::Embedding => Ok(GraphConditioning::Embedding(self.encode_future_graph(g, distance_ids, future_ids)?)),
        }
    }

    /// Decoder on the tape: `T × vocab_size` logits.
    pub fn decoder_graph(&self, g: &mut Graph<'_>, token_ids: &[u32], conditioning: &GraphConditioning) -> Result<Var> {
        self.check_tokens(token_ids)?;
        let ok = matches!(
            (self.config.injection_mode, conditioning),
            (InjectionMode::None, GraphConditioning::None)
                | (InjectionMode::Memory, GraphConditioning::Memory(_))
                | (InjectionMode::Embedding, GraphConditioning::Embedding(_))
        );
        if !ok {
            return Err(Error::ModeMismatch(self.config.injection_mode));
        }
        let dec = &self.ids.decoder;
        let mut x = self.graph_embed(g, dec, token_ids)?;
        if let GraphConditioning::Embedding(e) = conditioning {
            let (w, b) = self.ids.emb_in.ok_or(Error::ModeMismatch(self.config.injection_mode))?;
            let eb = g.broadcast_rows(*e, token_ids.len())?;
            let cat = g.concat_cols(x, eb)?;
            let (w, b) = (g.param(w), g.param(b));
            x = g.linear(cat, w, b)?;
        }
        for (l, layer) in dec.layers.iter().enumerate() {
            let mem = match conditioning {
                GraphConditioning::Memory(ms) => Some(*ms.get(l).ok_or_else(|| Error::Invalid("memory has too few layers".into()))?),
                _ => None,
            };
            x = self.graph_layer(g, layer, x, mem, true)?;
        }
        let (lg, lb) = (g.param(dec.lnf_g), g.param(dec.lnf_b));
        let x = g.layer_norm(x, lg, lb)?;
        let (hw, hb) = (g.param(self.ids.head_w), g.param(self.ids.head_b));
        g.linear(x, hw, hb)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Incremental decoding state: per-layer keys and values for every consumed
/// position, bound to the conditioning it was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    conditioning: Conditioning,
    memory_kv: Vec<(Vec<f64>, Vec<f64>)>,
    caches: Vec<LayerCache>,
    len: usize,
}

impl DecoderState {
    pub fn new(model: &Model, conditioning: Conditioning) -> Result<Self> {
        model.check_conditioning(&conditioning)?;
        let memory_kv = match &conditioning {
            Conditioning::Memory(m) => model
                .ids
                .decoder
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| model.memory_kv(layer, m.layer(l)))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        Ok(DecoderState {
            conditioning,
            memory_kv,
            caches: vec![LayerCache::default(); model.config.n_layers_dec],
            len: 0,
        })
    }

    /// Number of consumed positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn conditioning(&self) -> &Conditioning {
        &self.conditioning
    }

    /// Consumes `tokens` after the cached positions and returns their logits.
    pub fn extend(&mut self, model: &Model, tokens: &[u32]) -> Result<Tensor> {
        let total = self.len + tokens.len();
        if total > model.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: total,
                max: model.config.max_seq,
            });
        }
        model.check_tokens(tokens)?;
        let dec = &model.ids.decoder;
        let mut x = model.embed(dec, tokens, self.len)?;
        if let Conditioning::Embedding(e) = &self.conditioning {
            let (w, b) = model.ids.emb_in.ok_or(Error::ModeMismatch(model.config.injection_mode))?;
            let mut rows = Vec::with_capacity(tokens.len() * e.vector.len());
            for _ in 0..tokens.len() {
                rows.extend_from_slice(e.vector.data());
            }
            let eb = Tensor::matrix(tokens.len(), e.vector.len(), rows)?;
            let cat = tensor::concat_lastdim(&x, &eb)?;
            x = tensor::linear(&cat, model.params.value(w), model.params.value(b))?;
        }
        for (l, layer) in dec.layers.iter().enumerate() {
            let mem = self.memory_kv.get(l);
            model.layer_forward(layer, model.config.n_heads, &mut x, &mut self.caches[l], mem, true)?;
        }
        let x = tensor::layer_norm(&x, model.params.value(dec.lnf_g), model.params.value(dec.lnf_b))?;
        self.len = total;
        tensor::linear(&x, model.params.value(model.ids.head_w), model.params.value(model.ids.head_b))
    }
}
