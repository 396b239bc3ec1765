//! Budget sweeps and value-aware vs attention-only comparisons.
//!
//! Every (policy, ratio, seed) cell continues a shared prefill of that seed's
//! prompt and is scored against one full-cache reference generation per seed.
//! Seeds run in parallel; results are collected and ordered by policy, ratio
//! and seed, so output does not depend on scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::generation::{evaluate, generate_from, GenerateOptions, Prefilled, RunMetrics};
use crate::policy::PolicyConfig;
use crate::rng::XorShift64Star;

pub const SWEEP_CSV: &str = "sweep.csv";
pub const COMPARE_CSV: &str = "compare.csv";
pub const CONFIG_STAMP: &str = "config.txt";

pub const SWEEP_COLUMNS: [&str; 9] = [
    "policy",
    "vatp",
    "ratio",
    "seed",
    "token_match_rate",
    "attn_recon_error",
    "divergence_step",
    "kv_bytes",
    "aux_bytes",
];

pub const COMPARE_COLUMNS: [&str; 13] = [
    "policy",
    "vatp",
    "ratio",
    "baseline",
    "seeds",
    "recon_better",
    "recon_tied",
    "recon_worse",
    "match_better",
    "match_tied",
    "match_worse",
    "mean_recon",
    "baseline_mean_recon",
];

const PROMPT_SALT: u64 = 0x7072_6f6d_7074_0001;

/// Prompt tokens for one seed, uniform over the vocabulary.
pub fn prompt_for_seed(seed: u64, len: usize, vocab_size: usize) -> Vec<usize> {
    let mut rng = XorShift64Star::new(seed ^ PROMPT_SALT);
    (0..len).map(|_| rng.below(vocab_size as u64) as usize).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub policy: PolicyConfig,
    pub ratio: f64,
    pub seed: u64,
    pub metrics: RunMetrics,
    /// KV bytes over all heads after the first enforcement.
    pub kv_bytes: usize,
    pub aux_bytes: usize,
    /// KV bytes over all heads after prefill, before any eviction.
    pub prefill_kv_bytes: usize,
    pub prefill_aux_bytes: usize,
    pub sink_evictions: usize,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SWEEP_COLUMNS)?;
        for c in &self.cells {
            w.write_record([
                c.policy.kind.to_string(),
                c.policy.vatp.to_string(),
                format!("{:?}", c.ratio),
                c.seed.to_string(),
                format!("{:.6}", c.metrics.token_match_rate),
                format!("{:.9}", c.metrics.attn_recon_error),
                c.metrics
                    .divergence_step
                    .map_or_else(|| "none".to_string(), |s| s.to_string()),
                c.kv_bytes.to_string(),
                c.aux_bytes.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Mean reconstruction error of one policy at one ratio.
    pub fn mean_recon(&self, policy: &PolicyConfig, ratio: f64) -> Option<f64> {
        let errs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.policy.label() == policy.label() && c.ratio == ratio)
            .map(|c| c.metrics.attn_recon_error)
            .collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

fn run_seed(cfg: &ExperimentConfig, policies: &[PolicyConfig], seed: u64) -> Result<Vec<CellResult>> {
    let model = Decoder::build(crate::decoder::ModelConfig { seed, ..cfg.model })?;
    let prompt = prompt_for_seed(seed, cfg.prompt_len, cfg.model.vocab_size);
    let base = policies.first().copied().unwrap_or_else(PolicyConfig::full);
    let prefilled = Prefilled::new(&model, &prompt, &PolicyConfig { budget_ratio: 1.0, ..base })?;
    let full = PolicyConfig {
        norm_order: base.norm_order,
        history_window: base.history_window,
        ..PolicyConfig::full()
    };
    let reference = generate_from(&model, &prefilled, &full, cfg.gen_steps, GenerateOptions::default())?;

    let mut cells = Vec::with_capacity(policies.len() * cfg.budget_ratios.len());
    for p in policies {
        for &ratio in &cfg.budget_ratios {
            let policy = p.with_ratio(ratio);
            let (run, metrics) = evaluate(&model, &prefilled, &reference, &policy)?;
            cells.push(CellResult {
                policy,
                ratio,
                seed,
                metrics,
                kv_bytes: run.stats.pruned.kv_bytes,
                aux_bytes: run.stats.pruned.aux_bytes,
                prefill_kv_bytes: run.stats.prefill.kv_bytes,
                prefill_aux_bytes: run.stats.prefill.aux_bytes,
                sink_evictions: run.stats.sink_evictions,
                clamped: run.stats.clamped,
            });
        }
    }
    Ok(cells)
}

/// Runs every (policy, ratio, seed) cell without touching the filesystem.
pub fn run_cells(cfg: &ExperimentConfig, policies: &[PolicyConfig]) -> Result<ExperimentReport> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|i| cfg.model.seed.wrapping_add(i)).collect();
    let per_seed = seeds
        .par_iter()
        .map(|&s| run_seed(cfg, policies, s))
        .collect::<Result<Vec<_>>>()?;

    let n_ratios = cfg.budget_ratios.len();
    let mut cells = Vec::with_capacity(per_seed.len() * policies.len() * n_ratios);
    for pi in 0..policies.len() {
        for ri in 0..n_ratios {
            for seed_cells in &per_seed {
                cells.push(seed_cells[pi * n_ratios + ri].clone());
            }
        }
    }
    for p in policies {
        for &r in &cfg.budget_ratios {
            if cells.iter().any(|c| c.policy.label() == p.label() && c.ratio == r && c.clamped) {
                log::warn!(
                    "{} at ratio {r}: budget raised to fit sinks plus local window",
                    p.label()
                );
            }
        }
    }
    Ok(ExperimentReport { cells })
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, 0, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, 0, e))
}

/// Runs the configured sweep and writes `sweep.csv` plus a config stamp into
/// the output directory.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let report = run_cells(cfg, &cfg.policies)?;
    write_file(&cfg.output_dir.join(CONFIG_STAMP), &cfg.to_text())?;
    write_file(&cfg.output_dir.join(SWEEP_CSV), &report.to_csv()?)?;
    Ok(report)
}

/// Win/tie/loss counts of one policy against its attention-only baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub policy: PolicyConfig,
    pub baseline: PolicyConfig,
    pub ratio: f64,
    pub seeds: usize,
    pub recon: (usize, usize, usize),
    pub matches: (usize, usize, usize),
    pub mean_recon: f64,
    pub baseline_mean_recon: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompareReport {
    pub rows: Vec<ComparisonRow>,
}

fn tally(wins: impl Iterator<Item = std::cmp::Ordering>) -> (usize, usize, usize) {
    use std::cmp::Ordering::*;
    wins.fold((0, 0, 0), |(b, t, w), o| match o {
        Greater => (b + 1, t, w),
        Equal => (b, t + 1, w),
        Less => (b, t, w + 1),
    })
}

impl CompareReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COMPARE_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.policy.kind.to_string(),
                r.policy.vatp.to_string(),
                format!("{:?}", r.ratio),
                r.baseline.label(),
                r.seeds.to_string(),
                r.recon.0.to_string(),
                r.recon.1.to_string(),
                r.recon.2.to_string(),
                r.matches.0.to_string(),
                r.matches.1.to_string(),
                r.matches.2.to_string(),
                format!("{:.9}", r.mean_recon),
                format!("{:.9}", r.baseline_mean_recon),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:<14} {:>14} {:>14} {:>12} {:>12}",
            "policy", "ratio", "baseline", "recon b/t/w", "match b/t/w", "mean_recon", "base_recon"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:<14} {:>14} {:>14} {:>12.6} {:>12.6}",
                r.policy.label(),
                r.ratio,
                r.baseline.label(),
                format!("{}/{}/{}", r.recon.0, r.recon.1, r.recon.2),
                format!("{}/{}/{}", r.matches.0, r.matches.1, r.matches.2),
                r.mean_recon,
                r.baseline_mean_recon
            );
        }
        s
    }
}

/// Compares every configured policy with the same policy minus value-aware
/// scoring. Lower reconstruction error and higher token match count as better.
/// A policy that already is its own baseline ties on every seed.
pub fn compare_vatp(cfg: &ExperimentConfig) -> Result<CompareReport> {
    cfg.validate()?;
    let mut union: Vec<PolicyConfig> = Vec::new();
    for p in &cfg.policies {
        for q in [*p, PolicyConfig { vatp: false, ..*p }] {
            if !union.iter().any(|u| u.label() == q.label()) {
                union.push(q);
            }
        }
    }
    let report = run_cells(cfg, &union)?;
    let cells_of = |p: &PolicyConfig, ratio: f64| -> Vec<&CellResult> {
        report
            .cells
            .iter()
            .filter(|c| c.policy.label() == p.label() && c.ratio == ratio)
            .collect()
    };

    let mut rows = Vec::with_capacity(cfg.policies.len() * cfg.budget_ratios.len());
    for p in &cfg.policies {
        let baseline = PolicyConfig { vatp: false, ..*p };
        for &ratio in &cfg.budget_ratios {
            let cand = cells_of(p, ratio);
            let base = cells_of(&baseline, ratio);
            let pairs = || cand.iter().zip(&base);
            let recon = tally(pairs().map(|(c, b)| {
                b.metrics.attn_recon_error.total_cmp(&c.metrics.attn_recon_error)
            }));
            let matches = tally(pairs().map(|(c, b)| {
                c.metrics.token_match_rate.total_cmp(&b.metrics.token_match_rate)
            }));
            let mean = |cells: &[&CellResult]| {
                cells.iter().map(|c| c.metrics.attn_recon_error).sum::<f64>() / cells.len().max(1) as f64
            };
            rows.push(ComparisonRow {
                policy: p.with_ratio(ratio),
                baseline: baseline.with_ratio(ratio),
                ratio,
                seeds: cand.len(),
                recon,
                matches,
                mean_recon: mean(&cand),
                baseline_mean_recon: mean(&base),
            });
        }
    }
    Ok(CompareReport { rows })
}

/// Runs [`compare_vatp`] and writes `compare.csv` plus a config stamp.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    cfg.validate()?;
    prepare_dir(&cfg.output_dir)?;
    let report = compare_vatp(cfg)?;
    write_file(&cfg.output_dir.join(CONFIG_STAMP), &cfg.to_text())?;
    write_file(&cfg.output_dir.join(COMPARE_CSV), &report.to_csv()?)?;
    Ok(report)
}
