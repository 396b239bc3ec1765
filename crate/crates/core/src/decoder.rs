//! A seeded multi-head causal decoder small enough to run thousands of
//! generations per second.
//!
//! Block structure, per layer, for the residual stream `x`:
//!
//! ```text
//! x0 = embed[token] + sinusoid(position)
//! for each layer:
//!     h = rmsnorm(x)
//!     for each head: q, k, v = Wq h, Wk h, Wv h
//!                    append (k, v) to the head cache
//!                    a = softmax(q . k_i / sqrt(d_head) + bias_i) over cached slots
//!                    o = sum_i a_i v_i
//!     x = x + sum_heads Wo o
//!     x = x + W2 gelu(W1 rmsnorm(x))          (hidden width 4 * d_model)
//! logits = U rmsnorm(x)
//! ```
//!
//! `rmsnorm` has no learned gain. Position information enters only through the
//! input sinusoid, so an evicted-and-kept key carries the position it was
//! created at. Weights are uniform with unit variance scaled by
//! `1/sqrt(fan_in)`; embeddings are unit-variance and unscaled.
//!
//! In sink mode the first [`SINK_POSITIONS`] tokens receive a fixed logit bonus
//! from every query and have their value vectors shrunk, reproducing the
//! "high attention, tiny value" pattern of attention sinks in trained models.

use crate::cache::ModelCache;
use crate::error::{Error, Result};
use crate::math::{dot_unchecked, matvec, stable_softmax, Mat64};
use crate::rng::XorShift64Star;

pub const SINK_POSITIONS: usize = 2;
pub const SINK_LOGIT_BONUS: f64 = 4.0;
pub const SINK_VALUE_SCALE: f64 = 0.05;

const RMS_EPS: f64 = 1e-6;
const FF_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Synthetic attention sinks at the first positions. Test scenarios only.
    pub sink_mode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_head: 8,
            vocab_size: 64,
            seed: 1,
            sink_mode: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::invalid_config("layer, head and head-dim counts must be at least 1"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::invalid_config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid_config("vocab_size must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct HeadWeights {
    wq: Mat64,
    wk: Mat64,
    wv: Mat64,
    wo: Mat64,
}

#[derive(Debug, Clone)]
struct LayerWeights {
    heads: Vec<HeadWeights>,
    w1: Mat64,
    w2: Mat64,
}

/// Immutable model weights.
#[derive(Debug, Clone)]
pub struct Decoder {
    config: ModelConfig,
    embed: Mat64,
    layers: Vec<LayerWeights>,
    unembed: Mat64,
}

/// What one head did for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStep {
    pub layer: usize,
    pub head: usize,
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub value_norm: f64,
    /// Positions of the slots attended over, including the new token.
    pub positions: Vec<usize>,
    pub attention: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub position: usize,
    pub token: usize,
    /// Layer-major.
    pub heads: Vec<HeadStep>,
    pub logits: Vec<f64>,
}

fn random_matrix(rng: &mut XorShift64Star, rows: usize, cols: usize, scale: f64) -> Mat64 {
    let bound = 3f64.sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound) * scale).collect();
    Mat64::new(rows, cols, data).expect("finite by construction")
}

fn rmsnorm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Absolute sinusoidal encoding.
pub fn sinusoid(position: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = position as f64 / 10_000f64.powf(2.0 * pair / d_model as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

impl Decoder {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = XorShift64Star::new(config.seed);
        let d = config.d_model;
        let ff = FF_MULT * d;
        let in_scale = 1.0 / (d as f64).sqrt();

        let embed = random_matrix(&mut rng, config.vocab_size, d, 1.0);
        let layers = (0..config.n_layers)
            .map(|_| {
                let heads = (0..config.n_heads)
                    .map(|_| HeadWeights {
                        wq: random_matrix(&mut rng, config.d_head, d, in_scale),
                        wk: random_matrix(&mut rng, config.d_head, d, in_scale),
                        wv: random_matrix(&mut rng, config.d_head, d, in_scale),
                        wo: random_matrix(&mut rng, d, config.d_head, in_scale),
                    })
                    .collect();
                LayerWeights {
                    heads,
                    w1: random_matrix(&mut rng, ff, d, in_scale),
                    w2: random_matrix(&mut rng, d, ff, 1.0 / (ff as f64).sqrt()),
                }
            })
            .collect();
        let unembed = random_matrix(&mut rng, config.vocab_size, d, in_scale);
        Ok(Decoder {
            config,
            embed,
            layers,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// FNV-1a over the bit patterns of every weight, in generation order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |m: &Mat64| {
            for x in m.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        feed(&self.embed);
        for layer in &self.layers {
            for hw in &layer.heads {
                feed(&hw.wq);
                feed(&hw.wk);
                feed(&hw.wv);
                feed(&hw.wo);
            }
            feed(&layer.w1);
            feed(&layer.w2);
        }
        feed(&self.unembed);
        h
    }

    /// Additive attention-logit bias for a slot at `position`.
    pub fn logit_bias(&self, position: usize) -> f64 {
        if self.config.sink_mode && position < SINK_POSITIONS {
            SINK_LOGIT_BONUS
        } else {
            0.0
        }
    }

    fn check_cache(&self, caches: &ModelCache) -> Result<()> {
        let shape_ok = caches.n_layers() == self.config.n_layers
            && caches.n_heads() == self.config.n_heads
            && caches.heads().iter().all(|h| h.spec().d_head == self.config.d_head);
        if shape_ok {
            Ok(())
        } else {
            Err(Error::invalid_input("cache shape does not match the model"))
        }
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.config.vocab_size {
            return Err(Error::invalid_input(format!(
                "token id {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the prompt through the model one token at a time without any
    /// eviction. Returns one output per prompt token.
    pub fn prefill(&self, prompt: &[usize], caches: &mut ModelCache) -> Result<Vec<StepOutput>> {
        if prompt.is_empty() {
            return Err(Error::invalid_input("empty prompt"));
        }
        if !caches.is_empty() || caches.seen() != 0 {
            return Err(Error::invalid_input("prefill requires empty caches"));
        }
        for &t in prompt {
            self.check_token(t)?;
        }
        prompt.iter().map(|&t| self.decode_step(t, caches)).collect()
    }

    /// Processes one token at position `caches.seen()`, appending its key and
    /// value to every head cache and recording the attention rows.
    pub fn decode_step(&self, token: usize, caches: &mut ModelCache) -> Result<StepOutput> {
        self.check_token(token)?;
        self.check_cache(caches)?;
        let cfg = &self.config;
        let position = caches.seen();
        let inv_sqrt_dh = 1.0 / (cfg.d_head as f64).sqrt();
        let sink_token = cfg.sink_mode && position < SINK_POSITIONS;

        let mut x: Vec<f64> = self.embed.row(token).to_vec();
        add_into(&mut x, &sinusoid(position, cfg.d_model));

        let mut heads_out = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
        for (l, layer) in self.layers.iter().enumerate() {
            let h = rmsnorm(&x);
            let mut attn = vec![0.0; cfg.d_model];
            for (hi, hw) in layer.heads.iter().enumerate() {
                let query = matvec(&hw.wq, &h)?;
                let key = matvec(&hw.wk, &h)?;
                let mut value = matvec(&hw.wv, &h)?;
                if sink_token {
                    value.iter_mut().for_each(|v| *v *= SINK_VALUE_SCALE);
                }

                let cache = caches.head_mut(l, hi);
                cache.append(position, key.clone(), value.clone())?;
                let slots = cache.slots();
                let logits: Vec<f64> = slots
                    .iter()
                    .map(|s| dot_unchecked(&query, &s.key) * inv_sqrt_dh + self.logit_bias(s.position))
                    .collect();
                let attention = stable_softmax(&logits)?;
                let mut output = vec![0.0; cfg.d_head];
                for (a, s) in attention.iter().zip(slots) {
                    for (o, v) in output.iter_mut().zip(&s.value) {
                        *o += a * v;
                    }
                }
                let positions = cache.positions();
                let value_norm = slots.last().map(|s| s.value_norm).unwrap_or_default();
                cache.record_attention(&attention)?;

                add_into(&mut attn, &matvec(&hw.wo, &output)?);
                heads_out.push(HeadStep {
                    layer: l,
                    head: hi,
                    query,
                    key,
                    value,
                    value_norm,
                    positions,
                    attention,
                    output,
                });
            }
            add_into(&mut x, &attn);
            let hidden: Vec<f64> = matvec(&layer.w1, &rmsnorm(&x))?.into_iter().map(gelu).collect();
            add_into(&mut x, &matvec(&layer.w2, &hidden)?);
        }
        let logits = matvec(&self.unembed, &rmsnorm(&x))?;
        caches.advance();
        Ok(StepOutput {
            position,
            token,
            heads: heads_out,
            logits,
        })
    }
}
