//! Decoder-only language model built from pre-LN attention + FFN blocks.
//!
//! Layout: token embedding, optional learned sink vectors prepended to the
//! sequence, a LayerNorm right after the embeddings, `n_layers` blocks of
//! `x + attn(LN x)` and `x + ffn(LN x)`, a final LayerNorm and a linear head
//! (tied to the embedding table by default).

mod checkpoint;
mod tokenizer;

pub use checkpoint::{Checkpoint, Manifest, MomentState, ParamEntry, RngState, CHECKPOINT_FORMAT};
pub use tokenizer::Tokenizer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_traced, AttentionConfig, AttentionMode, AttentionTrace, AttentionWeights, TraceCapture};
use crate::tensor::{no_grad, Float, Tensor};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mode: AttentionMode,
    pub n_sinks: usize,
    pub ffn_mult: usize,
    pub tie_embeddings: bool,
    pub rope_theta: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny()
    }
}

/// A named configuration with the learning rate it was tuned for.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub config: ModelConfig,
    pub max_lr: f64,
}

impl ModelConfig {
    /// Desk-scale byte model: 2 layers, width 64, 4 heads of 16.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            vocab_size: 256,
            max_seq_len: 128,
            mode: AttentionMode::Sa,
            n_sinks: 0,
            ffn_mult: 4,
            tie_embeddings: true,
            rope_theta: crate::attention::DEFAULT_ROPE_THETA,
            seed: 0,
        }
    }

    fn large(n_layers: usize, d_model: usize, n_heads: usize, d_head: usize) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_head,
            vocab_size: 50_304,
            max_seq_len: 2048,
            ..ModelConfig::tiny()
        }
    }

    pub fn presets() -> Vec<Preset> {
        vec![
            Preset {
                name: "tiny",
                config: ModelConfig::tiny(),
                max_lr: 2e-3,
            },
            Preset {
                name: "0.7b",
                config: ModelConfig::large(24, 1536, 6, 256),
                max_lr: 5e-4,
            },
            Preset {
                name: "1.4b",
                config: ModelConfig::large(24, 2048, 24, 128),
                max_lr: 4e-4,
            },
            Preset {
                name: "2.7b",
                config: ModelConfig::large(32, 2560, 24, 128),
                max_lr: 3e-4,
            },
        ]
    }

    pub fn preset(name: &str) -> Result<Preset> {
        let key = name.to_ascii_lowercase();
        ModelConfig::presets()
            .into_iter()
            .find(|p| p.name == key)
            .ok_or_else(|| Error::config(format!("unknown preset `{name}` (tiny|0.7b|1.4b|2.7b)")))
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_head,
            mode: self.mode,
            rope_theta: self.rope_theta,
            n_sinks: self.n_sinks,
            rejection_eps: crate::attention::DEFAULT_REJECTION_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 || self.ffn_mult == 0 {
            return Err(Error::config("n_layers, vocab_size, max_seq_len and ffn_mult must be positive"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed must fit in a signed 64-bit integer"));
        }
        self.attention().validate()
    }

    /// Parameters outside the embedding table, head and sinks.
    pub fn nonembedding_params(&self) -> usize {
        let (d, inner, f) = (self.d_model, self.n_heads * self.d_head, self.ffn_dim());
        let per_layer = 4 * d * inner + 2 * d * f + 4 * d;
        self.n_layers * per_layer + 4 * d
    }

    pub fn embedding_params(&self) -> usize {
        let head = if self.tie_embeddings { 0 } else { self.vocab_size * self.d_model };
        self.vocab_size * self.d_model + head + self.n_sinks * self.d_model
    }

    pub fn total_params(&self) -> usize {
        self.nonembedding_params() + self.embedding_params()
    }
}

/// How a parameter is treated by weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Matmul weights; decayed.
    Matrix,
    /// LayerNorm gains and biases.
    Norm,
    /// Embedding table, untied head and sink vectors.
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Matrix
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<S: Float> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Float> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::ones(&[dim]).requiring_grad(),
            bias: Tensor::zeros(&[dim]).requiring_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward<S: Float> {
    /// `[d_model, ffn_dim]`
    pub w_fc: Tensor<S>,
    /// `[ffn_dim, d_model]`
    pub w_proj: Tensor<S>,
}

impl<S: Float> FeedForward<S> {
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(&self.w_fc)?.gelu().matmul(&self.w_proj)
    }
}

#[derive(Debug, Clone)]
pub struct Block<S: Float> {
    pub ln1: LayerNorm<S>,
    pub attn: AttentionWeights<S>,
    pub ln2: LayerNorm<S>,
    pub ffn: FeedForward<S>,
}

impl<S: Float> Block<S> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let out_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        let attn = AttentionWeights::init(&cfg.attention(), INIT_STD, out_std, rng);
        let (d, f) = (cfg.d_model, cfg.ffn_dim());
        let ffn = FeedForward {
            w_fc: Tensor::randn(&[d, f], INIT_STD, rng).requiring_grad(),
            w_proj: Tensor::randn(&[f, d], out_std, rng).requiring_grad(),
        };
        Block {
            ln1: LayerNorm::new(d),
            attn,
            ln2: LayerNorm::new(d),
            ffn,
        }
    }

    /// One residual block on `[.., T, d_model]`.
    pub fn forward(
        &self,
        x: &Tensor<S>,
        cfg: &AttentionConfig,
        capture: TraceCapture,
    ) -> Result<(Tensor<S>, Option<AttentionTrace<S>>)> {
        let (a, trace) = attend_traced(&self.ln1.forward(x)?, &self.attn, cfg, capture)?;
        let x = x.add(&a)?;
        drop(a);
        let f = self.ffn.forward(&self.ln2.forward(&x)?)?;
        Ok((x.add(&f)?, trace))
    }

    /// Parameters named `<prefix>.<path>`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, ParamKind, &Tensor<S>)> {
        let mut out = vec![
            (format!("{prefix}.ln1.gain"), ParamKind::Norm, &self.ln1.gain),
            (format!("{prefix}.ln1.bias"), ParamKind::Norm, &self.ln1.bias),
        ];
        for (name, t) in self.attn.tensors() {
            out.push((format!("{prefix}.attn.{name}"), ParamKind::Matrix, t));
        }
        out.extend([
            (format!("{prefix}.ln2.gain"), ParamKind::Norm, &self.ln2.gain),
            (format!("{prefix}.ln2.bias"), ParamKind::Norm, &self.ln2.bias),
            (format!("{prefix}.ffn.w_fc"), ParamKind::Matrix, &self.ffn.w_fc),
            (format!("{prefix}.ffn.w_proj"), ParamKind::Matrix, &self.ffn.w_proj),
        ]);
        out
    }

    fn slots_mut(&mut self, prefix: &str) -> Vec<(String, ParamKind, &mut Tensor<S>)> {
        let mut out = vec![
            (format!("{prefix}.ln1.gain"), ParamKind::Norm, &mut self.ln1.gain),
            (format!("{prefix}.ln1.bias"), ParamKind::Norm, &mut self.ln1.bias),
        ];
        for (name, t) in self.attn.tensors_mut() {
            out.push((format!("{prefix}.attn.{name}"), ParamKind::Matrix, t));
        }
        out.extend([
            (format!("{prefix}.ln2.gain"), ParamKind::Norm, &mut self.ln2.gain),
            (format!("{prefix}.ln2.bias"), ParamKind::Norm, &mut self.ln2.bias),
            (format!("{prefix}.ffn.w_fc"), ParamKind::Matrix, &mut self.ffn.w_fc),
            (format!("{prefix}.ffn.w_proj"), ParamKind::Matrix, &mut self.ffn.w_proj),
        ]);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Model<S: Float = f32> {
    cfg: ModelConfig,
    /// `[vocab, d_model]`
    pub wte: Tensor<S>,
    /// `[n_sinks, d_model]`; empty when the model has no sinks.
    pub sinks: Tensor<S>,
    pub ln_emb: LayerNorm<S>,
    pub blocks: Vec<Block<S>>,
    pub ln_f: LayerNorm<S>,
    /// `[vocab, d_model]`; `None` when tied to `wte`.
    pub lm_head: Option<Tensor<S>>,
}

/// Builds a model with weights drawn from `seed`.
pub fn build_model<S: Float>(cfg: &ModelConfig, seed: u64) -> Result<Model<S>> {
    let cfg = ModelConfig { seed, ..cfg.clone() };
    Model::new(&cfg)
}

impl<S: Float> Model<S> {
    /// Deterministic initialization from `cfg.seed`. Sink vectors are drawn
    /// last, so adding sinks leaves every other initial weight unchanged.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let wte = Tensor::randn(&[cfg.vocab_size, d], INIT_STD, &mut rng).requiring_grad();
        let blocks = (0..cfg.n_layers).map(|_| Block::init(cfg, &mut rng)).collect();
        let lm_head = (!cfg.tie_embeddings)
            .then(|| Tensor::randn(&[cfg.vocab_size, d], INIT_STD, &mut rng).requiring_grad());
        let sinks = Tensor::randn(&[cfg.n_sinks, d], INIT_STD, &mut rng);
        let sinks = if cfg.n_sinks > 0 { sinks.requiring_grad() } else { sinks };
        Ok(Model {
            cfg: cfg.clone(),
            wte,
            sinks,
            ln_emb: LayerNorm::new(d),
            blocks,
            ln_f: LayerNorm::new(d),
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Switches between SA and XSA without touching any weight.
    pub fn set_mode(&mut self, mode: AttentionMode) {
        self.cfg.mode = mode;
    }

    fn head(&self) -> &Tensor<S> {
        self.lm_head.as_ref().unwrap_or(&self.wte)
    }

    /// Trainable tensors in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, ParamKind, &Tensor<S>)> {
        let mut out = vec![("wte".to_string(), ParamKind::Embedding, &self.wte)];
        if self.cfg.n_sinks > 0 {
            out.push(("sinks".to_string(), ParamKind::Embedding, &self.sinks));
        }
        out.push(("ln_emb.gain".to_string(), ParamKind::Norm, &self.ln_emb.gain));
        out.push(("ln_emb.bias".to_string(), ParamKind::Norm, &self.ln_emb.bias));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("blocks.{i}")));
        }
        out.push(("ln_f.gain".to_string(), ParamKind::Norm, &self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), ParamKind::Norm, &self.ln_f.bias));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".to_string(), ParamKind::Embedding, h));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor<S>)> {
        let mut out = vec![("wte".to_string(), ParamKind::Embedding, &mut self.wte)];
        if self.cfg.n_sinks > 0 {
            out.push(("sinks".to_string(), ParamKind::Embedding, &mut self.sinks));
        }
        out.push(("ln_emb.gain".to_string(), ParamKind::Norm, &mut self.ln_emb.gain));
        out.push(("ln_emb.bias".to_string(), ParamKind::Norm, &mut self.ln_emb.bias));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.slots_mut(&format!("blocks.{i}")));
        }
        out.push(("ln_f.gain".to_string(), ParamKind::Norm, &mut self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), ParamKind::Norm, &mut self.ln_f.bias));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".to_string(), ParamKind::Embedding, h));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, _, t) in self.params() {
            t.zero_grad();
        }
    }

    fn check_ids(&self, ids: &[usize], batch: usize, t: usize) -> Result<()> {
        if t == 0 || batch == 0 {
            return Err(Error::shape("empty token batch"));
        }
        if t > self.cfg.max_seq_len {
            return Err(Error::config(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        if ids.len() != batch * t {
            return Err(Error::shape(format!("{} ids for a {batch}x{t} batch", ids.len())));
        }
        Ok(())
    }

    fn run(
        &self,
        ids: &[usize],
        batch: usize,
        t: usize,
        with_sinks: bool,
        capture: TraceCapture,
    ) -> Result<(Tensor<S>, Vec<AttentionTrace<S>>)> {
        self.check_ids(ids, batch, t)?;
        let d = self.cfg.d_model;
        let mut h = self.wte.embedding(ids, &[batch, t])?;
        let k = if with_sinks { self.cfg.n_sinks } else { 0 };
        if with_sinks {
            let prefix = self.sinks.reshape(&[1, k, d])?.broadcast_to(&[batch, k, d])?;
            h = Tensor::concat(&[&prefix, &h], 1)?;
        }
        h = self.ln_emb.forward(&h)?;
        let acfg = AttentionConfig {
            n_sinks: k,
            ..self.cfg.attention()
        };
        let mut traces = Vec::new();
        for block in &self.blocks {
            let (next, trace) = block.forward(&h, &acfg, capture)?;
            h = next;
            traces.extend(trace);
        }
        if k > 0 {
            h = h.narrow(1, k, t)?;
        }
        let logits = self.ln_f.forward(&h)?.matmul_t(self.head())?;
        Ok((logits, traces))
    }

    /// Logits `[batch, t, vocab]` for row-major ids.
    pub fn forward_batch(&self, ids: &[usize], batch: usize, t: usize) -> Result<Tensor<S>> {
        self.run(ids, batch, t, true, TraceCapture::Off).map(|(l, _)| l)
    }

    /// Logits `[T, vocab]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        let t = tokens.len();
        self.forward_batch(tokens, 1, t)?.reshape(&[t, self.cfg.vocab_size])
    }

    /// Forward pass that also returns one attention trace per layer.
    /// Traces include the sink prefix; `AttentionTrace::n_sinks` says how long it is.
    pub fn forward_traced(
        &self,
        ids: &[usize],
        batch: usize,
        t: usize,
        capture: TraceCapture,
    ) -> Result<(Tensor<S>, Vec<AttentionTrace<S>>)> {
        let capture = if capture == TraceCapture::Off { TraceCapture::Diag } else { capture };
        self.run(ids, batch, t, true, capture)
    }

    /// Reference path that never touches the sink machinery, whatever `n_sinks` is.
    pub fn forward_sink_free(&self, ids: &[usize], batch: usize, t: usize) -> Result<Tensor<S>> {
        self.run(ids, batch, t, false, TraceCapture::Off).map(|(l, _)| l)
    }

    /// Mean next-token cross-entropy in nats.
    pub fn loss(&self, inputs: &[usize], targets: &[usize], batch: usize, t: usize) -> Result<Tensor<S>> {
        let logits = self.forward_batch(inputs, batch, t)?;
        logits.reshape(&[batch * t, self.cfg.vocab_size])?.cross_entropy(targets)
    }

    /// Autoregressive continuation of `prompt`; returns only the new tokens.
    ///
    /// `temperature == 0` decodes greedily (argmax, lowest id on ties) and
    /// ignores `seed`. The context is cropped to the last `max_seq_len`
    /// tokens and recomputed from scratch for every new token.
    pub fn sample(&self, prompt: &[usize], n_new: usize, temperature: f64, seed: u64) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::config("sampling needs a non-empty prompt"));
        }
        if prompt.len() > self.cfg.max_seq_len {
            return Err(Error::config(format!(
                "prompt of {} tokens exceeds max_seq_len {}",
                prompt.len(),
                self.cfg.max_seq_len
            )));
        }
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::config(format!("temperature must be finite and >= 0, got {temperature}")));
        }
        let _guard = no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = prompt.to_vec();
        let mut out = Vec::with_capacity(n_new);
        let v = self.cfg.vocab_size;
        for _ in 0..n_new {
            let start = ctx.len().saturating_sub(self.cfg.max_seq_len);
            let window = &ctx[start..];
            let logits = self.forward(window)?;
            let last: Vec<f64> = logits.data()[(window.len() - 1) * v..].iter().map(|x| x.as_f64()).collect();
            let next = if temperature == 0.0 {
                argmax(&last)
            } else {
                draw(&last, temperature, &mut rng)
            };
            ctx.push(next);
            out.push(next);
        }
        Ok(out)
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests;
