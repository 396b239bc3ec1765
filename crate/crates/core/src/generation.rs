//! Closed-loop greedy generation under an eviction policy.
//!
//! The prompt is prefilled without eviction, the budget is enforced once, and
//! then every generated token is fed back through the decoder with the budget
//! enforced again after each step. Evicted slots change later attention rows,
//! so a policy's choices feed back into what the model generates.
//!
//! Prefill does not depend on the policy, so a [`Prefilled`] state can be
//! computed once and continued under several policies.

use crate::cache::{MemoryAccounting, ModelCache};
use crate::decoder::{Decoder, StepOutput};
use crate::error::{Error, Result};
use crate::math::argmax;
use crate::policy::{enforce_budget, PolicyConfig};

/// Evictions performed by one budget enforcement across all heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EnforcementRecord {
    /// Tokens processed when the budget was applied.
    pub seen: usize,
    /// Evicted positions per head, layer-major.
    pub evicted: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    /// Totals over all heads right after prefill, before eviction.
    pub prefill: MemoryAccounting,
    /// Right after the first enforcement.
    pub pruned: MemoryAccounting,
    /// At the end of generation.
    pub last: MemoryAccounting,
    /// Evicted slots whose position lies below the configured sink count.
    pub sink_evictions: usize,
    pub total_evictions: usize,
    /// Whether any enforcement had to raise its budget.
    pub clamped: bool,
}

/// Model state after the prompt, before any eviction.
#[derive(Debug, Clone)]
pub struct Prefilled {
    caches: ModelCache,
    outputs: Vec<StepOutput>,
}

impl Prefilled {
    pub fn new(model: &Decoder, prompt: &[usize], policy: &PolicyConfig) -> Result<Self> {
        let cfg = model.config();
        let mut caches = ModelCache::new(cfg.n_layers, cfg.n_heads, policy.cache_spec(cfg.d_head));
        let outputs = model.prefill(prompt, &mut caches)?;
        Ok(Prefilled { caches, outputs })
    }

    pub fn prompt_len(&self) -> usize {
        self.outputs.len()
    }

    pub fn outputs(&self) -> &[StepOutput] {
        &self.outputs
    }

    pub fn caches(&self) -> &ModelCache {
        &self.caches
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GenerateOptions<'a> {
    /// Keep every prefill and decode output in [`Generation::steps`].
    pub keep_steps: bool,
    /// Feed these tokens instead of the model's own predictions.
    pub forced: Option<&'a [usize]>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub policy: PolicyConfig,
    pub prompt_len: usize,
    /// Tokens fed through the decoder after the prompt.
    pub tokens: Vec<usize>,
    /// Greedy prediction after each fed token; equals `tokens[i + 1]` unless forced.
    pub predictions: Vec<usize>,
    /// Head attention outputs for every decode step, `[step][layer * n_heads + head]`.
    pub head_outputs: Vec<Vec<Vec<f64>>>,
    pub enforcements: Vec<EnforcementRecord>,
    pub stats: CacheStats,
    /// Prefill and decode outputs, when requested.
    pub steps: Vec<StepOutput>,
}

fn enforce_all(
    caches: &mut ModelCache,
    policy: &PolicyConfig,
    stats: &mut CacheStats,
) -> Result<EnforcementRecord> {
    let seen = caches.seen();
    let mut evicted = Vec::with_capacity(caches.heads().len());
    for head in caches.heads_mut() {
        let report = enforce_budget(head, policy, seen)?;
        stats.clamped |= report.budget.clamped;
        stats.sink_evictions += report.evicted.iter().filter(|&&p| p < policy.sink_count).count();
        stats.total_evictions += report.evicted.len();
        evicted.push(report.evicted);
    }
    Ok(EnforcementRecord { seen, evicted })
}

fn next_token(logits: &[f64]) -> Result<usize> {
    argmax(logits).ok_or_else(|| Error::invalid_input("empty logits"))
}

/// Greedy generation of `steps` tokens after `prompt`.
pub fn generate(model: &Decoder, prompt: &[usize], policy: &PolicyConfig, steps: usize) -> Result<Generation> {
    generate_with(model, prompt, policy, steps, GenerateOptions::default())
}

pub fn generate_with(
    model: &Decoder,
    prompt: &[usize],
    policy: &PolicyConfig,
    steps: usize,
    opts: GenerateOptions<'_>,
) -> Result<Generation> {
    policy.validate()?;
    let prefilled = Prefilled::new(model, prompt, policy)?;
    generate_from(model, &prefilled, policy, steps, opts)
}

/// Continues a prefilled state under `policy`.
pub fn generate_from(
    model: &Decoder,
    prefilled: &Prefilled,
    policy: &PolicyConfig,
    steps: usize,
    opts: GenerateOptions<'_>,
) -> Result<Generation> {
    policy.validate()?;
    if let Some(f) = opts.forced {
        if f.len() < steps {
            return Err(Error::invalid_input(format!(
                "{} forced tokens for {steps} steps",
                f.len()
            )));
        }
    }
    let mut caches = prefilled.caches.clone();
    caches.respec(policy.cache_spec(model.config().d_head))?;
    let mut stats = CacheStats {
        prefill: caches.memory_accounting(),
        ..CacheStats::default()
    };
    let mut enforcements = vec![enforce_all(&mut caches, policy, &mut stats)?];
    stats.pruned = caches.memory_accounting();

    let last = prefilled.outputs.last().ok_or_else(|| Error::invalid_input("empty prompt"))?;
    let mut next = next_token(&last.logits)?;
    let mut recorded = if opts.keep_steps {
        prefilled.outputs.clone()
    } else {
        Vec::new()
    };

    let mut tokens = Vec::with_capacity(steps);
    let mut predictions = Vec::with_capacity(steps);
    let mut head_outputs = Vec::with_capacity(steps);
    for i in 0..steps {
        if let Some(f) = opts.forced {
            next = f[i];
        }
        tokens.push(next);
        let out = model.decode_step(next, &mut caches)?;
        enforcements.push(enforce_all(&mut caches, policy, &mut stats)?);
        next = next_token(&out.logits)?;
        predictions.push(next);
        head_outputs.push(out.heads.iter().map(|h| h.output.clone()).collect());
        if opts.keep_steps {
            recorded.push(out);
        }
    }
    stats.last = caches.memory_accounting();

    Ok(Generation {
        policy: *policy,
        prompt_len: prefilled.prompt_len(),
        tokens,
        predictions,
        head_outputs,
        enforcements,
        stats,
        steps: recorded,
    })
}

/// Agreement between a pruned run and the full-cache reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    /// Fraction of closed-loop tokens equal to the reference tokens.
    pub token_match_rate: f64,
    /// Mean over decode steps and heads of the l2 distance between head
    /// attention outputs, with both runs fed the reference tokens.
    pub attn_recon_error: f64,
    /// First step at which the closed-loop tokens differ.
    pub divergence_step: Option<usize>,
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Token agreement of a closed-loop run with the reference.
pub fn token_agreement(reference: &Generation, run: &Generation) -> Result<(f64, Option<usize>)> {
    if reference.tokens.len() != run.tokens.len() {
        return Err(Error::invalid_input("runs differ in generation length"));
    }
    let n = run.tokens.len();
    if n == 0 {
        return Ok((1.0, None));
    }
    let pairs = || reference.tokens.iter().zip(&run.tokens);
    let matches = pairs().filter(|(a, b)| a == b).count();
    Ok((matches as f64 / n as f64, pairs().position(|(a, b)| a != b)))
}

/// Mean l2 distance between head attention outputs of two runs fed the same
/// tokens.
pub fn recon_error(reference: &Generation, run: &Generation) -> Result<f64> {
    if reference.tokens != run.tokens {
        return Err(Error::invalid_input(
            "reconstruction error needs both runs fed the same tokens",
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (ref_step, step) in reference.head_outputs.iter().zip(&run.head_outputs) {
        for (a, b) in ref_step.iter().zip(step) {
            total += l2_distance(a, b);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Runs `policy` closed-loop and, when its tokens diverge from the reference,
/// a second pass fed the reference tokens for the reconstruction error.
/// Returns the closed-loop run.
pub fn evaluate(
    model: &Decoder,
    prefilled: &Prefilled,
    reference: &Generation,
    policy: &PolicyConfig,
) -> Result<(Generation, RunMetrics)> {
    let steps = reference.tokens.len();
    let closed = generate_from(model, prefilled, policy, steps, GenerateOptions::default())?;
    let (token_match_rate, divergence_step) = token_agreement(reference, &closed)?;
    let attn_recon_error = if divergence_step.is_none() {
        recon_error(reference, &closed)?
    } else {
        let forced = generate_from(
            model,
            prefilled,
            policy,
            steps,
            GenerateOptions {
                keep_steps: false,
                forced: Some(&reference.tokens),
            },
        )?;
        recon_error(reference, &forced)?
    };
    Ok((
        closed,
        RunMetrics {
            token_match_rate,
            attn_recon_error,
            divergence_step,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::ModelConfig;
    use crate::policy::PolicyKind;

    fn model() -> Decoder {
        Decoder::build(ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            vocab_size: 32,
            seed: 3,
            sink_mode: false,
        })
        .unwrap()
    }

    fn prompt(n: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 7 + 3) % 32).collect()
    }

    /// Plain loop with no policy machinery at all.
    fn reference_loop(m: &Decoder, prompt: &[usize], steps: usize) -> Vec<usize> {
        let cfg = m.config();
        let mut c = ModelCache::new(cfg.n_layers, cfg.n_heads, PolicyConfig::full().cache_spec(cfg.d_head));
        let mut logits = Vec::new();
        for &t in prompt {
            logits = m.decode_step(t, &mut c).unwrap().logits;
        }
        let mut out = Vec::new();
        for _ in 0..steps {
            let next = argmax(&logits).unwrap();
            out.push(next);
            logits = m.decode_step(next, &mut c).unwrap().logits;
        }
        out
    }

    #[test]
    fn full_cache_matches_plain_loop() {
        let m = model();
        let g = generate(&m, &prompt(20), &PolicyConfig::full(), 12).unwrap();
        assert_eq!(g.tokens, reference_loop(&m, &prompt(20), 12));
        assert_eq!(&g.tokens[1..], &g.predictions[..11]);
        assert_eq!(g.stats.total_evictions, 0);
    }

    #[test]
    fn zero_steps() {
        let m = model();
        let g = generate(&m, &prompt(5), &PolicyConfig::full(), 0).unwrap();
        assert!(g.tokens.is_empty());
        assert_eq!(token_agreement(&g, &g).unwrap(), (1.0, None));
        assert_eq!(recon_error(&g, &g).unwrap(), 0.0);
        assert_eq!(g.stats.prefill.kv_bytes, 5 * 4 * 2 * 4 * 8);
    }

    #[test]
    fn unit_ratio_matches_full_cache() {
        let m = model();
        let p = prompt(24);
        let full = generate(&m, &p, &PolicyConfig::full(), 16).unwrap();
        let pre = Prefilled::new(&m, &p, &PolicyConfig::full()).unwrap();
        for label in ["streamllm", "h2o", "h2o+vatp", "scissorhands", "scissorhands+vatp"] {
            let mut cfg: PolicyConfig = label.parse().unwrap();
            cfg.budget_ratio = 1.0;
            cfg.sink_count = 4;
            let (g, metrics) = evaluate(&m, &pre, &full, &cfg).unwrap();
            assert_eq!(g.tokens, full.tokens, "{label}");
            assert_eq!(metrics.attn_recon_error, 0.0);
            assert_eq!(metrics.token_match_rate, 1.0);
            assert_eq!(g.stats.total_evictions, 0);
        }
    }

    #[test]
    fn shared_prefill_matches_fresh_run() {
        let m = model();
        let p = prompt(30);
        let pre = Prefilled::new(&m, &p, &PolicyConfig::full()).unwrap();
        let mut cfg = PolicyConfig::new(PolicyKind::Scissorhands, true).with_ratio(0.5);
        cfg.sink_count = 3;
        cfg.history_window = 8;
        cfg.norm_order = crate::math::NormOrder::L2;
        let fresh = generate(&m, &p, &cfg, 10).unwrap();
        let shared = generate_from(&m, &pre, &cfg, 10, GenerateOptions::default()).unwrap();
        assert_eq!(fresh.tokens, shared.tokens);
        assert_eq!(fresh.head_outputs, shared.head_outputs);
        assert_eq!(fresh.enforcements, shared.enforcements);
    }

    #[test]
    fn forced_tokens_are_fed() {
        let m = model();
        let p = prompt(12);
        let forced = vec![5, 5, 5, 5];
        let g = generate_with(
            &m,
            &p,
            &PolicyConfig::full(),
            4,
            GenerateOptions {
                keep_steps: false,
                forced: Some(&forced),
            },
        )
        .unwrap();
        assert_eq!(g.tokens, forced);
        let short = GenerateOptions {
            keep_steps: false,
            forced: Some(&forced[..2]),
        };
        assert!(generate_with(&m, &p, &PolicyConfig::full(), 4, short).is_err());
    }

    #[test]
    fn pruned_run_respects_budget() {
        let m = model();
        let mut cfg = PolicyConfig::new(PolicyKind::H2o, true).with_ratio(0.5);
        cfg.sink_count = 2;
        let opts = GenerateOptions {
            keep_steps: true,
            forced: None,
        };
        let g = generate_with(&m, &prompt(40), &cfg, 10, opts).unwrap();
        assert_eq!(g.stats.pruned.kv_bytes * 2, g.stats.prefill.kv_bytes);
        assert_eq!(g.stats.sink_evictions, 0);
        assert_eq!(g.steps.len(), 50);
        assert_eq!(g.enforcements.len(), 11);
        for step in &g.steps[40..] {
            for h in &step.heads {
                // floor(seen / 2) retained plus the new token.
                assert!(h.positions.len() <= step.position / 2 + 1);
                assert!(h.positions.contains(&0) && h.positions.contains(&1));
            }
        }
    }
}
