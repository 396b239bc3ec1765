//! Per-head KV storage.
//!
//! A [`HeadCache`] holds the retained tokens of one attention head in
//! ascending position order. Each [`TokenSlot`] carries its key and value, the
//! value norm computed once at append time, the running sum of attention it has
//! received and a bounded window of the most recent per-step scores.

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::math::{lp_norm, NormOrder};

const F64_BYTES: usize = std::mem::size_of::<f64>();

/// Identifies a slot by the original sequence position of its token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotHandle(pub usize);

/// Shape and bookkeeping parameters shared by every head of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheSpec {
    pub d_head: usize,
    pub norm: NormOrder,
    /// Positions below this are flagged as sinks.
    pub sink_count: usize,
    /// Refuse to evict sink slots.
    pub protect_sinks: bool,
    /// Capacity of each slot's recent-score window.
    pub history_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSlot {
    pub position: usize,
    /// Empty for slots rebuilt from a trace, which only carries norms.
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub value_norm: f64,
    pub acc_score: f64,
    /// Oldest first.
    pub window_scores: VecDeque<f64>,
    pub is_sink: bool,
}

impl TokenSlot {
    pub fn handle(&self) -> SlotHandle {
        SlotHandle(self.position)
    }

    /// Sum of the windowed scores, oldest to newest.
    pub fn window_sum(&self) -> f64 {
        self.window_scores.iter().sum()
    }
}

/// Byte counts for one cache, assuming f64 storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemoryAccounting {
    /// Keys plus values.
    pub kv_bytes: usize,
    /// One cached value norm per slot.
    pub aux_bytes: usize,
    /// Recent-score windows, reported separately from the norm overhead.
    pub window_bytes: usize,
}

impl std::ops::AddAssign for MemoryAccounting {
    fn add_assign(&mut self, rhs: Self) {
        self.kv_bytes += rhs.kv_bytes;
        self.aux_bytes += rhs.aux_bytes;
        self.window_bytes += rhs.window_bytes;
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    layer: usize,
    head: usize,
    spec: CacheSpec,
    slots: Vec<TokenSlot>,
    rows_recorded: usize,
    budget: Option<usize>,
}

impl HeadCache {
    pub fn new(layer: usize, head: usize, spec: CacheSpec) -> Self {
        HeadCache {
            layer,
            head,
            spec,
            slots: Vec::new(),
            rows_recorded: 0,
            budget: None,
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn spec(&self) -> &CacheSpec {
        &self.spec
    }

    pub fn slots(&self) -> &[TokenSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.position).collect()
    }

    /// Number of attention rows recorded since creation.
    pub fn rows_recorded(&self) -> usize {
        self.rows_recorded
    }

    /// Effective budget applied by the most recent budget enforcement.
    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    pub(crate) fn set_budget(&mut self, budget: usize) {
        self.budget = Some(budget);
    }

    fn check_position(&self, position: usize) -> Result<()> {
        match self.slots.last() {
            Some(last) if position <= last.position => Err(Error::invalid_input(format!(
                "append at position {position} after position {}",
                last.position
            ))),
            _ => Ok(()),
        }
    }

    fn push(&mut self, position: usize, key: Vec<f64>, value: Vec<f64>, value_norm: f64) -> SlotHandle {
        self.slots.push(TokenSlot {
            position,
            key,
            value,
            value_norm,
            acc_score: 0.0,
            window_scores: VecDeque::with_capacity(self.spec.history_window.min(64)),
            is_sink: position < self.spec.sink_count,
        });
        SlotHandle(position)
    }

    pub fn append(&mut self, position: usize, key: Vec<f64>, value: Vec<f64>) -> Result<SlotHandle> {
        self.check_position(position)?;
        if key.len() != self.spec.d_head || value.len() != self.spec.d_head {
            return Err(Error::invalid_input(format!(
                "key/value lengths {}/{} do not match d_head {}",
                key.len(),
                value.len(),
                self.spec.d_head
            )));
        }
        let norm = lp_norm(&value, self.spec.norm)?;
        Ok(self.push(position, key, value, norm))
    }

    /// Appends a slot known only by its value norm (trace replay).
    pub fn append_norm_only(&mut self, position: usize, value_norm: f64) -> Result<SlotHandle> {
        self.check_position(position)?;
        if !value_norm.is_finite() || value_norm < 0.0 {
            return Err(Error::invalid_input(format!("invalid value norm {value_norm}")));
        }
        Ok(self.push(position, Vec::new(), Vec::new(), value_norm))
    }

    /// Adds one attention row (aligned with the current slots) to every slot's
    /// running sum and recent-score window.
    pub fn record_attention(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.slots.len() {
            return Err(Error::invalid_input(format!(
                "attention row of length {} for {} slots",
                row.len(),
                self.slots.len()
            )));
        }
        if row.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid_input("attention row has negative or non-finite entries"));
        }
        let total: f64 = row.iter().sum();
        if !row.is_empty() && (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid_input(format!("attention row sums to {total}")));
        }
        let cap = self.spec.history_window;
        for (slot, &a) in self.slots.iter_mut().zip(row) {
            slot.acc_score += a;
            slot.window_scores.push_back(a);
            while slot.window_scores.len() > cap {
                slot.window_scores.pop_front();
            }
        }
        self.rows_recorded += 1;
        Ok(())
    }

    /// Removes the given slots, keeping survivors in order. Validates the whole
    /// set before touching the cache.
    pub fn evict(&mut self, handles: &[SlotHandle]) -> Result<()> {
        if handles.is_empty() {
            return Ok(());
        }
        let doomed: BTreeSet<usize> = handles.iter().map(|h| h.0).collect();
        for &pos in &doomed {
            let slot = self
                .slots
                .binary_search_by_key(&pos, |s| s.position)
                .map(|i| &self.slots[i])
                .map_err(|_| Error::InvalidHandle(pos))?;
            if slot.is_sink && self.spec.protect_sinks {
                return Err(Error::SinkProtected(pos));
            }
        }
        self.slots.retain(|s| !doomed.contains(&s.position));
        Ok(())
    }

    /// Switches to another spec with the same head size. Norms are recomputed
    /// when the norm order changes, and score windows are trimmed to the new
    /// capacity. Growing the window fails once history has been discarded.
    pub fn respec(&mut self, spec: CacheSpec) -> Result<()> {
        if spec.d_head != self.spec.d_head {
            return Err(Error::invalid_input("respec cannot change d_head"));
        }
        if spec.history_window > self.spec.history_window && self.rows_recorded > self.spec.history_window {
            return Err(Error::invalid_input(
                "respec cannot grow a score window that has already dropped rows",
            ));
        }
        if spec.norm != self.spec.norm {
            for s in &mut self.slots {
                if s.value.is_empty() {
                    return Err(Error::invalid_input("cannot renormalise a norm-only slot"));
                }
                s.value_norm = lp_norm(&s.value, spec.norm)?;
            }
        }
        for s in &mut self.slots {
            s.is_sink = s.position < spec.sink_count;
            while s.window_scores.len() > spec.history_window {
                s.window_scores.pop_front();
            }
        }
        self.spec = spec;
        Ok(())
    }

    pub fn memory_accounting(&self) -> MemoryAccounting {
        let n = self.slots.len();
        MemoryAccounting {
            kv_bytes: n * 2 * self.spec.d_head * F64_BYTES,
            aux_bytes: n * F64_BYTES,
            window_bytes: self.slots.iter().map(|s| s.window_scores.len()).sum::<usize>() * F64_BYTES,
        }
    }
}

/// All head caches of one generation run, layer-major.
#[derive(Debug, Clone)]
pub struct ModelCache {
    n_layers: usize,
    n_heads: usize,
    heads: Vec<HeadCache>,
    seen: usize,
}

impl ModelCache {
    pub fn new(n_layers: usize, n_heads: usize, spec: CacheSpec) -> Self {
        let heads = (0..n_layers)
            .flat_map(|l| (0..n_heads).map(move |h| HeadCache::new(l, h, spec)))
            .collect();
        ModelCache {
            n_layers,
            n_heads,
            heads,
            seen: 0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Tokens processed so far; also the position of the next token.
    pub fn seen(&self) -> usize {
        self.seen
    }

    pub(crate) fn advance(&mut self) {
        self.seen += 1;
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadCache {
        &self.heads[layer * self.n_heads + head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadCache {
        &mut self.heads[layer * self.n_heads + head]
    }

    pub fn heads(&self) -> &[HeadCache] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [HeadCache] {
        &mut self.heads
    }

    pub fn is_empty(&self) -> bool {
        self.heads.iter().all(HeadCache::is_empty)
    }

    pub fn respec(&mut self, spec: CacheSpec) -> Result<()> {
        self.heads.iter_mut().try_for_each(|h| h.respec(spec))
    }

    pub fn memory_accounting(&self) -> MemoryAccounting {
        let mut total = MemoryAccounting::default();
        for h in &self.heads {
            total += h.memory_accounting();
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(d_head: usize) -> CacheSpec {
        CacheSpec {
            d_head,
            norm: NormOrder::L1,
            sink_count: 2,
            protect_sinks: true,
            history_window: 3,
        }
    }

    fn filled(n: usize, spec: CacheSpec) -> HeadCache {
        let mut c = HeadCache::new(0, 0, spec);
        for p in 0..n {
            let v = vec![p as f64 - 1.5; spec.d_head];
            c.append(p, vec![0.0; spec.d_head], v).unwrap();
        }
        c
    }

    #[test]
    fn append_precomputes_norm() {
        let mut c = HeadCache::new(0, 0, spec(3));
        c.append(0, vec![0.0; 3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(c.len(), 1);
        let s = &c.slots()[0];
        assert_eq!(s.value_norm, 6.0);
        assert_eq!(s.acc_score, 0.0);
        assert!(s.window_scores.is_empty());
        assert!(s.is_sink);
    }

    #[test]
    fn append_rejects_out_of_order_and_bad_shapes() {
        let mut c = HeadCache::new(0, 0, spec(2));
        c.append(5, vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert!(matches!(
            c.append(5, vec![0.0; 2], vec![1.0; 2]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            c.append(3, vec![0.0; 2], vec![1.0; 2]),
            Err(Error::InvalidInput(_))
        ));
        assert!(c.append(6, vec![0.0; 3], vec![1.0; 2]).is_err());
        assert!(c.append_norm_only(7, -1.0).is_err());
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn single_row_accumulates() {
        let mut c = filled(2, spec(1));
        c.record_attention(&[0.2, 0.8]).unwrap();
        let acc: Vec<f64> = c.slots().iter().map(|s| s.acc_score).collect();
        assert_eq!(acc, vec![0.2, 0.8]);
        assert!(c.record_attention(&[1.0]).is_err());
        assert!(c.record_attention(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn window_of_one_keeps_latest() {
        let mut c = HeadCache::new(0, 0, CacheSpec { history_window: 1, ..spec(1) });
        c.append(0, vec![0.0], vec![1.0]).unwrap();
        c.append(1, vec![0.0], vec![1.0]).unwrap();
        c.record_attention(&[0.3, 0.7]).unwrap();
        c.record_attention(&[0.9, 0.1]).unwrap();
        let windows: Vec<Vec<f64>> = c
            .slots()
            .iter()
            .map(|s| s.window_scores.iter().copied().collect())
            .collect();
        assert_eq!(windows, vec![vec![0.9], vec![0.1]]);
    }

    #[test]
    fn evict_paths() {
        let mut c = filled(6, spec(2));
        c.evict(&[]).unwrap();
        assert_eq!(c.len(), 6);

        assert!(matches!(c.evict(&[SlotHandle(17)]), Err(Error::InvalidHandle(17))));
        assert!(matches!(
            c.evict(&[SlotHandle(3), SlotHandle(1)]),
            Err(Error::SinkProtected(1))
        ));
        // Failed evictions leave the cache untouched.
        assert_eq!(c.len(), 6);

        c.evict(&[SlotHandle(2), SlotHandle(3), SlotHandle(4), SlotHandle(5)])
            .unwrap();
        assert_eq!(c.positions(), vec![0, 1]);
        assert!(c.slots().iter().all(|s| s.is_sink));
    }

    #[test]
    fn unprotected_sinks_can_go() {
        let mut c = filled(4, CacheSpec { protect_sinks: false, ..spec(2) });
        c.evict(&[SlotHandle(0)]).unwrap();
        assert_eq!(c.positions(), vec![1, 2, 3]);
    }

    #[test]
    fn accounting_examples() {
        let c = filled(10, spec(4));
        let m = c.memory_accounting();
        assert_eq!(m.kv_bytes, 640);
        assert_eq!(m.aux_bytes, 80);
        assert_eq!(m.aux_bytes * 2 * 4, m.kv_bytes);

        let empty = HeadCache::new(0, 0, spec(4)).memory_accounting();
        assert_eq!((empty.kv_bytes, empty.aux_bytes), (0, 0));

        // 7B-scale head: the norm costs 1/(2*128) of the KV storage.
        let big = filled(3, spec(128)).memory_accounting();
        assert_eq!(big.aux_bytes * 256, big.kv_bytes);
    }

    #[test]
    fn window_bytes_are_separate() {
        let mut c = filled(2, spec(4));
        c.record_attention(&[0.5, 0.5]).unwrap();
        let m = c.memory_accounting();
        assert_eq!(m.window_bytes, 16);
        assert_eq!(m.aux_bytes, 16);
    }

    #[test]
    fn hundred_random_appends_stay_sorted() {
        let mut c = HeadCache::new(0, 0, spec(1));
        let mut state = 0x9E37_79B9_7F4A_7C15_u64;
        let mut pos = 0usize;
        for _ in 0..100 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            pos += 1 + (state % 5) as usize;
            c.append(pos, vec![0.0], vec![1.0]).unwrap();
        }
        assert_eq!(c.len(), 100);
        assert!(c.positions().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn respec_updates_flags_norms_and_windows() {
        let mut c = filled(4, spec(2));
        c.record_attention(&[0.25; 4]).unwrap();
        c.record_attention(&[0.25; 4]).unwrap();
        let wider = CacheSpec { history_window: 10, ..spec(2) };
        // Nothing dropped yet, so growing is allowed.
        c.respec(wider).unwrap();
        c.respec(CacheSpec { sink_count: 3, norm: NormOrder::Inf, history_window: 1, ..spec(2) })
            .unwrap();
        assert_eq!(c.slots().iter().filter(|s| s.is_sink).count(), 3);
        assert_eq!(c.slots()[3].value_norm, 1.5);
        assert!(c.slots().iter().all(|s| s.window_scores.len() == 1));
        assert!(c.respec(wider).is_err());
        assert!(c.respec(spec(3)).is_err());
    }

    proptest! {
        #[test]
        fn random_evictions_preserve_order_and_mass(
            n in 1usize..40,
            rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 40), 1..10),
            mask in prop::collection::vec(any::<bool>(), 40),
        ) {
            let sp = CacheSpec { protect_sinks: false, ..spec(2) };
            let mut c = HeadCache::new(0, 0, sp);
            let mut recorded = 0usize;
            for p in 0..n {
                c.append(p, vec![0.1; 2], vec![p as f64, -1.0]).unwrap();
                let raw = &rows[p % rows.len()][..c.len()];
                let total: f64 = raw.iter().sum();
                let row: Vec<f64> = raw.iter().map(|x| x / total).collect();
                c.record_attention(&row).unwrap();
                recorded += 1;
            }
            let before = c.positions();
            let doomed: Vec<SlotHandle> = before
                .iter()
                .filter(|p| mask[**p])
                .map(|&p| SlotHandle(p))
                .collect();
            c.evict(&doomed).unwrap();
            let after = c.positions();
            prop_assert_eq!(after.len(), before.len() - doomed.len());
            prop_assert!(after.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(after.iter().all(|p| before.contains(p) && !mask[*p]));
            let mass: f64 = c.slots().iter().map(|s| s.acc_score).sum();
            prop_assert!(mass <= recorded as f64 + 1e-6);
            for s in c.slots() {
                prop_assert_eq!(s.value_norm, lp_norm(&s.value, NormOrder::L1).unwrap());
                prop_assert!(s.window_scores.len() <= sp.history_window);
            }
        }
    }
}
