//! Token importance scoring and retained-set selection.
//!
//! Five policies share one selection routine. A retained set is composed of
//! three disjoint groups:
//!
//! * protected sinks: slots at positions below `sink_count`, kept only by
//!   StreamLLM and the value-aware variants;
//! * the local window: the most recent `L` slots;
//! * heavy hitters: the highest-scoring remaining slots, until the budget is
//!   filled. Equal scores prefer the more recent slot.
//!
//! Attention-only scores are the running attention sum (H2O) or the sum over
//! the last `w` rows (Scissorhands). The value-aware variants multiply that
//! score by the slot's cached value norm.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::cache::{CacheSpec, HeadCache, SlotHandle};
use crate::error::{Error, Result};
use crate::math::NormOrder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    FullCache,
    StreamLlm,
    H2o,
    Scissorhands,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::FullCache => "full",
            PolicyKind::StreamLlm => "streamllm",
            PolicyKind::H2o => "h2o",
            PolicyKind::Scissorhands => "scissorhands",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "fullcache" | "full_cache" => Ok(PolicyKind::FullCache),
            "streamllm" | "stream" => Ok(PolicyKind::StreamLlm),
            "h2o" => Ok(PolicyKind::H2o),
            "scissorhands" => Ok(PolicyKind::Scissorhands),
            other => Err(Error::invalid_config(format!("unknown policy `{other}`"))),
        }
    }
}

pub const DEFAULT_SINK_COUNT: usize = 20;
pub const LONG_SINK_COUNT: usize = 40;
pub const DEFAULT_LOCAL_WINDOW: usize = 10;
pub const DEFAULT_HISTORY_WINDOW: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Multiply attention scores by value norms. H2O and Scissorhands only.
    pub vatp: bool,
    /// Retained slots per head as a fraction of tokens seen, in (0, 1].
    pub budget_ratio: f64,
    pub sink_count: usize,
    /// Local window for Scissorhands. H2O uses half the budget and StreamLLM
    /// whatever the sinks leave over.
    pub local_window: usize,
    pub history_window: usize,
    pub norm_order: NormOrder,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, vatp: bool) -> Self {
        PolicyConfig {
            kind,
            vatp,
            budget_ratio: 0.5,
            sink_count: DEFAULT_SINK_COUNT,
            local_window: DEFAULT_LOCAL_WINDOW,
            history_window: DEFAULT_HISTORY_WINDOW,
            norm_order: NormOrder::L1,
        }
    }

    pub fn full() -> Self {
        PolicyConfig::new(PolicyKind::FullCache, false)
    }

    pub fn with_ratio(mut self, ratio: f64) -> Self {
        self.budget_ratio = ratio;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vatp && !matches!(self.kind, PolicyKind::H2o | PolicyKind::Scissorhands) {
            return Err(Error::invalid_config(format!(
                "value-aware scoring is not defined for {}",
                self.kind
            )));
        }
        if !(self.budget_ratio > 0.0 && self.budget_ratio <= 1.0) {
            return Err(Error::invalid_config(format!(
                "budget ratio {} outside (0, 1]",
                self.budget_ratio
            )));
        }
        if self.history_window == 0 {
            return Err(Error::invalid_config("history window must be at least 1"));
        }
        Ok(())
    }

    /// Short name such as `h2o+vatp`.
    pub fn label(&self) -> String {
        if self.vatp {
            format!("{}+vatp", self.kind)
        } else {
            self.kind.to_string()
        }
    }

    pub fn protects_sinks(&self) -> bool {
        self.vatp || self.kind == PolicyKind::StreamLlm
    }

    pub fn cache_spec(&self, d_head: usize) -> CacheSpec {
        CacheSpec {
            d_head,
            norm: self.norm_order,
            sink_count: self.sink_count,
            protect_sinks: self.protects_sinks(),
            history_window: self.history_window,
        }
    }

    /// Budget after `seen` tokens have been processed.
    pub fn budget(&self, seen: usize) -> Budget {
        let requested = ((self.budget_ratio * seen as f64 + 1e-9).floor() as usize).max(1);
        let sinks = if self.protects_sinks() { self.sink_count } else { 0 };
        let local = match self.kind {
            PolicyKind::FullCache => 0,
            PolicyKind::H2o => requested / 2,
            PolicyKind::Scissorhands => self.local_window,
            PolicyKind::StreamLlm => requested.saturating_sub(sinks),
        };
        let effective = requested.max(sinks + local);
        Budget {
            requested,
            effective,
            sinks,
            local,
            clamped: effective > requested,
        }
    }
}

impl FromStr for PolicyConfig {
    type Err = Error;

    /// Parses a label such as `scissorhands+vatp` with default hyperparameters.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, vatp) = match s.strip_suffix("+vatp") {
            Some(base) => (base.parse()?, true),
            None => (s.parse()?, false),
        };
        let cfg = PolicyConfig::new(kind, vatp);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Budget components for one enforcement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    /// floor(ratio * seen), at least 1.
    pub requested: usize,
    /// Requested budget raised to fit sinks plus the local window.
    pub effective: usize,
    pub sinks: usize,
    pub local: usize,
    pub clamped: bool,
}

/// Per-slot importance, aligned with cache slot order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportanceVector(pub Vec<f64>);

impl ImportanceVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn score_h2o(cache: &HeadCache) -> ImportanceVector {
    ImportanceVector(cache.slots().iter().map(|s| s.acc_score).collect())
}

pub fn score_scissorhands(cache: &HeadCache) -> ImportanceVector {
    ImportanceVector(cache.slots().iter().map(|s| s.window_sum()).collect())
}

pub fn apply_vatp(scores: &ImportanceVector, cache: &HeadCache) -> Result<ImportanceVector> {
    if scores.len() != cache.len() {
        return Err(Error::invalid_input(format!(
            "{} scores for {} slots",
            scores.len(),
            cache.len()
        )));
    }
    Ok(ImportanceVector(
        scores
            .0
            .iter()
            .zip(cache.slots())
            .map(|(s, slot)| s * slot.value_norm)
            .collect(),
    ))
}

/// Scores the cache as `cfg` prescribes. StreamLLM ranks by position and
/// FullCache returns all zeros.
pub fn score(cache: &HeadCache, cfg: &PolicyConfig) -> Result<ImportanceVector> {
    let base = match cfg.kind {
        PolicyKind::FullCache => ImportanceVector(vec![0.0; cache.len()]),
        PolicyKind::StreamLlm => {
            ImportanceVector(cache.slots().iter().map(|s| s.position as f64).collect())
        }
        PolicyKind::H2o => score_h2o(cache),
        PolicyKind::Scissorhands => score_scissorhands(cache),
    };
    if cfg.vatp {
        apply_vatp(&base, cache)
    } else {
        Ok(base)
    }
}

/// Chooses which slots survive after `seen` tokens. Returned handles are in
/// position order.
pub fn select_retained(
    scores: &ImportanceVector,
    cache: &HeadCache,
    cfg: &PolicyConfig,
    seen: usize,
) -> Result<Vec<SlotHandle>> {
    if scores.len() != cache.len() {
        return Err(Error::invalid_input(format!(
            "{} scores for {} slots",
            scores.len(),
            cache.len()
        )));
    }
    let slots = cache.slots();
    let all = || slots.iter().map(|s| s.handle()).collect();
    if cfg.kind == PolicyKind::FullCache {
        return Ok(all());
    }
    let budget = cfg.budget(seen);
    if slots.len() <= budget.effective {
        return Ok(all());
    }

    let n = slots.len();
    let mut keep = vec![false; n];
    let mut kept = 0usize;
    if cfg.protects_sinks() {
        for (i, s) in slots.iter().enumerate() {
            if s.position < cfg.sink_count {
                keep[i] = true;
                kept += 1;
            }
        }
    }
    let mut local = 0usize;
    for i in (0..n).rev() {
        if local == budget.local {
            break;
        }
        if !keep[i] {
            keep[i] = true;
            kept += 1;
            local += 1;
        }
    }

    let heavy = budget.effective.saturating_sub(kept);
    let mut candidates: Vec<usize> = (0..n).filter(|&i| !keep[i]).collect();
    if heavy > 0 && !candidates.is_empty() {
        let order = |a: &usize, b: &usize| -> Ordering {
            scores.0[*b]
                .total_cmp(&scores.0[*a])
                .then_with(|| slots[*b].position.cmp(&slots[*a].position))
        };
        if heavy < candidates.len() {
            candidates.select_nth_unstable_by(heavy - 1, order);
            candidates.truncate(heavy);
        }
        for i in candidates {
            keep[i] = true;
        }
    }

    Ok(slots
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| s.handle())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvictionReport {
    pub budget: Budget,
    /// Positions removed, ascending.
    pub evicted: Vec<usize>,
}

/// Scores the cache, selects the retained set and evicts everything else.
pub fn enforce_budget(cache: &mut HeadCache, cfg: &PolicyConfig, seen: usize) -> Result<EvictionReport> {
    let budget = cfg.budget(seen);
    if cfg.kind == PolicyKind::FullCache {
        return Ok(EvictionReport {
            budget,
            evicted: Vec::new(),
        });
    }
    let scores = score(cache, cfg)?;
    let retained = select_retained(&scores, cache, cfg, seen)?;
    let mut evicted = Vec::with_capacity(cache.len() - retained.len());
    let mut r = retained.iter().peekable();
    for s in cache.slots() {
        if r.peek().is_some_and(|h| h.0 == s.position) {
            r.next();
        } else {
            evicted.push(s.position);
        }
    }
    let handles: Vec<SlotHandle> = evicted.iter().map(|&p| SlotHandle(p)).collect();
    cache.evict(&handles)?;
    cache.set_budget(budget.effective);
    Ok(EvictionReport { budget, evicted })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache_with(n: usize, cfg: &PolicyConfig) -> HeadCache {
        let mut c = HeadCache::new(0, 0, cfg.cache_spec(3));
        for p in 0..n {
            c.append(p, vec![0.0; 3], vec![1.0, -2.0, 3.0]).unwrap();
        }
        c
    }

    #[test]
    fn labels_round_trip() {
        for label in ["full", "streamllm", "h2o", "h2o+vatp", "scissorhands", "scissorhands+vatp"] {
            let cfg: PolicyConfig = label.parse().unwrap();
            assert_eq!(cfg.label(), label);
        }
        assert!("streamllm+vatp".parse::<PolicyConfig>().is_err());
        assert!("full+vatp".parse::<PolicyConfig>().is_err());
        assert!("lru".parse::<PolicyConfig>().is_err());
    }

    #[test]
    fn validation() {
        assert!(PolicyConfig::new(PolicyKind::H2o, false).with_ratio(0.0).validate().is_err());
        assert!(PolicyConfig::new(PolicyKind::H2o, false).with_ratio(1.5).validate().is_err());
        assert!(PolicyConfig::new(PolicyKind::H2o, false).with_ratio(1.0).validate().is_ok());
        assert!(PolicyConfig::new(PolicyKind::StreamLlm, true).validate().is_err());
    }

    #[test]
    fn budget_split() {
        let h2o = PolicyConfig::new(PolicyKind::H2o, false).with_ratio(0.5);
        let b = h2o.budget(256);
        assert_eq!((b.requested, b.local, b.effective, b.clamped), (128, 64, 128, false));

        let sh = PolicyConfig::new(PolicyKind::Scissorhands, true).with_ratio(0.1);
        let b = sh.budget(100);
        assert_eq!((b.requested, b.effective, b.clamped), (10, 30, true));

        let st = PolicyConfig::new(PolicyKind::StreamLlm, false).with_ratio(0.5);
        assert_eq!(st.budget(100).local, 30);
        assert_eq!(st.budget(1).requested, 1);
        // floor(0.29 * 100) must not fall to 28 through rounding.
        assert_eq!(st.with_ratio(0.29).budget(100).requested, 29);
    }

    #[test]
    fn h2o_scores_follow_rows() {
        let cfg = PolicyConfig::new(PolicyKind::H2o, false);
        let mut c = HeadCache::new(0, 0, cfg.cache_spec(1));
        assert!(score_h2o(&c).is_empty());
        c.append(0, vec![0.0], vec![1.0]).unwrap();
        assert_eq!(score_h2o(&c).0, vec![0.0]);
        c.record_attention(&[1.0]).unwrap();
        c.append(1, vec![0.0], vec![1.0]).unwrap();
        c.record_attention(&[0.3, 0.7]).unwrap();
        assert_eq!(score_h2o(&c).0, vec![1.3, 0.7]);
    }

    #[test]
    fn vatp_examples() {
        let cfg = PolicyConfig::new(PolicyKind::H2o, true);
        let c = cache_with(1, &cfg);
        let out = apply_vatp(&ImportanceVector(vec![0.5]), &c).unwrap();
        assert_eq!(out.0, vec![3.0]);
        let out = apply_vatp(&ImportanceVector(vec![0.0]), &c).unwrap();
        assert_eq!(out.0, vec![0.0]);
        assert!(apply_vatp(&ImportanceVector(vec![0.5, 0.5]), &c).is_err());
    }

    #[test]
    fn streamllm_keeps_sinks_and_window() {
        let mut cfg = PolicyConfig::new(PolicyKind::StreamLlm, false).with_ratio(0.5);
        cfg.sink_count = 2;
        let mut c = cache_with(10, &cfg);
        // ratio 0.5 of 10 seen gives k = 5: two sinks plus a window of three.
        let report = enforce_budget(&mut c, &cfg, 10).unwrap();
        assert_eq!(c.positions(), vec![0, 1, 7, 8, 9]);
        assert_eq!(report.evicted, vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn full_budget_keeps_everything() {
        let cfg = PolicyConfig::new(PolicyKind::H2o, true).with_ratio(1.0);
        let mut c = cache_with(12, &cfg);
        let scores = score(&c, &cfg).unwrap();
        assert_eq!(select_retained(&scores, &c, &cfg, 12).unwrap().len(), 12);
        assert!(enforce_budget(&mut c, &cfg, 12).unwrap().evicted.is_empty());
    }

    #[test]
    fn full_cache_never_evicts() {
        let cfg = PolicyConfig::full().with_ratio(0.01);
        let mut c = cache_with(50, &cfg);
        assert!(enforce_budget(&mut c, &cfg, 50).unwrap().evicted.is_empty());
        assert_eq!(c.len(), 50);
    }

    #[test]
    fn enforcement_is_idempotent() {
        let cfg = PolicyConfig::new(PolicyKind::Scissorhands, false).with_ratio(0.5);
        let mut c = cache_with(40, &cfg);
        let first = enforce_budget(&mut c, &cfg, 40).unwrap();
        assert_eq!(first.evicted.len(), 20);
        let second = enforce_budget(&mut c, &cfg, 40).unwrap();
        assert!(second.evicted.is_empty());
    }

    #[test]
    fn ties_prefer_recent_slots() {
        let mut cfg = PolicyConfig::new(PolicyKind::Scissorhands, false).with_ratio(0.5);
        cfg.local_window = 1;
        let c = cache_with(8, &cfg);
        let scores = ImportanceVector(vec![1.0; 8]);
        let kept: Vec<usize> = select_retained(&scores, &c, &cfg, 8)
            .unwrap()
            .into_iter()
            .map(|h| h.0)
            .collect();
        assert_eq!(kept, vec![4, 5, 6, 7]);
    }

    #[test]
    fn h2o_without_vatp_does_not_pin_sinks() {
        let mut cfg = PolicyConfig::new(PolicyKind::H2o, false).with_ratio(0.5);
        cfg.sink_count = 2;
        let c = cache_with(8, &cfg);
        // Sinks score lowest; k = 4 splits into two local and two heavy slots.
        let scores = ImportanceVector(vec![0.0, 0.0, 5.0, 4.0, 3.0, 2.0, 1.0, 1.0]);
        let kept: Vec<usize> = select_retained(&scores, &c, &cfg, 8)
            .unwrap()
            .into_iter()
            .map(|h| h.0)
            .collect();
        assert_eq!(kept, vec![2, 3, 6, 7]);

        let vcfg = PolicyConfig { vatp: true, ..cfg };
        let c = cache_with(8, &vcfg);
        let kept: Vec<usize> = select_retained(&scores, &c, &vcfg, 8)
            .unwrap()
            .into_iter()
            .map(|h| h.0)
            .collect();
        assert_eq!(kept, vec![0, 1, 6, 7]);
    }
}
