//! Attention traces: recording, the `KVTRACE v1` file format, open-loop
//! replay and synthetic sink traces.
//!
//! A trace holds one record per (step, layer, head): the attention row the
//! new token's query produced over the slots it could see, plus the new
//! token's value norm. Replay rebuilds norm-only caches from those records and
//! drives the policy engine without a model. Replay is open-loop: evictions
//! made during replay cannot change the rows that follow.
//!
//! File layout, one record per line, space separated:
//!
//! ```text
//! KVTRACE v1
//! meta prompt_len=<n> n_layers=<n> n_heads=<n> d_head=<n> norm=<l1|l2|linf> encoding=<hex|dec>
//! v1 <step> <layer> <head> <a0,a1,...> <position> <value_norm> <value_dim>
//! ```
//!
//! With `encoding=hex` every float is the 16-digit hex of its IEEE-754 bits,
//! so traces round-trip exactly. `encoding=dec` writes shortest round-trip
//! decimals and exists for reading traces by eye.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::cache::ModelCache;
use crate::decoder::ModelConfig;
use crate::error::{Error, Result};
use crate::generation::Generation;
use crate::math::NormOrder;
use crate::policy::{enforce_budget, score, ImportanceVector, PolicyConfig};
use crate::rng::XorShift64Star;

pub const HEADER: &str = "KVTRACE v1";
const RECORD_TAG: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FloatEncoding {
    #[default]
    Hex,
    Decimal,
}

impl FloatEncoding {
    fn as_str(self) -> &'static str {
        match self {
            FloatEncoding::Hex => "hex",
            FloatEncoding::Decimal => "dec",
        }
    }

    fn write(self, x: f64) -> String {
        match self {
            FloatEncoding::Hex => format!("{:016x}", x.to_bits()),
            FloatEncoding::Decimal => format!("{x:?}"),
        }
    }

    fn read(self, s: &str) -> Option<f64> {
        match self {
            FloatEncoding::Hex if s.len() == 16 => u64::from_str_radix(s, 16).ok().map(f64::from_bits),
            FloatEncoding::Hex => None,
            FloatEncoding::Decimal => s.parse().ok(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceMeta {
    /// Budget enforcement starts once this many tokens have been seen.
    pub prompt_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// Norm order the recorded value norms were computed with.
    pub norm: NormOrder,
    pub encoding: FloatEncoding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub attention_row: Vec<f64>,
    pub position: usize,
    pub value_norm: f64,
    pub value_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    /// Records every head of every step kept by a generation run with
    /// `keep_steps` enabled.
    pub fn from_generation(gen: &Generation, model: &ModelConfig) -> Result<Self> {
        if gen.steps.len() != gen.prompt_len + gen.tokens.len() {
            return Err(Error::invalid_input(
                "generation was run without keeping its steps",
            ));
        }
        let records = gen
            .steps
            .iter()
            .flat_map(|step| {
                step.heads.iter().map(move |h| TraceRecord {
                    step: step.position,
                    layer: h.layer,
                    head: h.head,
                    attention_row: h.attention.clone(),
                    position: step.position,
                    value_norm: h.value_norm,
                    value_dim: h.value.len(),
                })
            })
            .collect();
        Ok(Trace {
            meta: TraceMeta {
                prompt_len: gen.prompt_len,
                n_layers: model.n_layers,
                n_heads: model.n_heads,
                d_head: model.d_head,
                norm: gen.policy.norm_order,
                encoding: FloatEncoding::Hex,
            },
            records,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = &self.meta;
        let enc = m.encoding;
        writeln!(w, "{HEADER}")?;
        writeln!(
            w,
            "meta prompt_len={} n_layers={} n_heads={} d_head={} norm={} encoding={}",
            m.prompt_len,
            m.n_layers,
            m.n_heads,
            m.d_head,
            m.norm,
            enc.as_str()
        )?;
        for r in &self.records {
            let row: Vec<String> = r.attention_row.iter().map(|&a| enc.write(a)).collect();
            writeln!(
                w,
                "{RECORD_TAG} {} {} {} {} {} {} {}",
                r.step,
                r.layer,
                r.head,
                row.join(","),
                r.position,
                enc.write(r.value_norm),
                r.value_dim
            )?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("trace text is ASCII")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, 0, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, 0, e))?;
        w.flush().map_err(|e| Error::io(path, 0, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, 0, e))?;
        let mut reader = BufReader::new(file);
        let mut lines = Vec::new();
        let mut offset = 0u64;
        let mut buf = String::new();
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf).map_err(|e| Error::io(path, offset, e))?;
            if n == 0 {
                break;
            }
            offset += n as u64;
            lines.push(buf.trim_end_matches(['\n', '\r']).to_string());
        }
        Trace::parse_lines(lines.iter().map(String::as_str))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Trace::parse_lines(text.lines())
    }

    fn parse_lines<'a>(mut lines: impl Iterator<Item = &'a str>) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::InvalidTrace {
            line,
            msg: msg.to_string(),
        };
        match lines.next() {
            Some(h) if h.trim() == HEADER => {}
            _ => return Err(bad(1, "missing `KVTRACE v1` header")),
        }
        let meta = parse_meta(lines.next().ok_or_else(|| bad(2, "missing meta line"))?)
            .map_err(|msg| bad(2, &msg))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 3;
            if line.trim().is_empty() {
                continue;
            }
            records.push(parse_record(line, meta.encoding).map_err(|msg| bad(lineno, &msg))?);
        }
        Ok(Trace { meta, records })
    }
}

fn parse_meta(line: &str) -> std::result::Result<TraceMeta, String> {
    let mut fields = line.split_whitespace();
    if fields.next() != Some("meta") {
        return Err("expected `meta` line".into());
    }
    let (mut prompt_len, mut n_layers, mut n_heads, mut d_head) = (None, None, None, None);
    let mut norm = None;
    let mut encoding = None;
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| format!("malformed meta field `{f}`"))?;
        let int = || v.parse::<usize>().map_err(|_| format!("bad integer for `{k}`"));
        match k {
            "prompt_len" => prompt_len = Some(int()?),
            "n_layers" => n_layers = Some(int()?),
            "n_heads" => n_heads = Some(int()?),
            "d_head" => d_head = Some(int()?),
            "norm" => norm = Some(v.parse::<NormOrder>().map_err(|e| e.to_string())?),
            "encoding" => {
                encoding = Some(match v {
                    "hex" => FloatEncoding::Hex,
                    "dec" => FloatEncoding::Decimal,
                    _ => return Err(format!("unknown encoding `{v}`")),
                })
            }
            _ => return Err(format!("unknown meta field `{k}`")),
        }
    }
    let need = |x: Option<usize>, k: &str| x.ok_or_else(|| format!("meta is missing `{k}`"));
    Ok(TraceMeta {
        prompt_len: need(prompt_len, "prompt_len")?,
        n_layers: need(n_layers, "n_layers")?,
        n_heads: need(n_heads, "n_heads")?,
        d_head: need(d_head, "d_head")?,
        norm: norm.ok_or("meta is missing `norm`")?,
        encoding: encoding.ok_or("meta is missing `encoding`")?,
    })
}

fn parse_record(line: &str, enc: FloatEncoding) -> std::result::Result<TraceRecord, String> {
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() != 8 {
        return Err(format!("expected 8 fields, found {}", f.len()));
    }
    if f[0] != RECORD_TAG {
        return Err(format!("unsupported record version `{}`", f[0]));
    }
    let int = |i: usize| f[i].parse::<usize>().map_err(|_| format!("bad integer `{}`", f[i]));
    let float = |s: &str| enc.read(s).ok_or_else(|| format!("bad float `{s}`"));
    let attention_row = if f[4].is_empty() {
        Vec::new()
    } else {
        f[4].split(',').map(float).collect::<std::result::Result<Vec<_>, _>>()?
    };
    Ok(TraceRecord {
        step: int(1)?,
        layer: int(2)?,
        head: int(3)?,
        attention_row,
        position: int(5)?,
        value_norm: float(f[6])?,
        value_dim: int(7)?,
    })
}

/// State of one head after one budget enforcement during replay.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayHead {
    pub layer: usize,
    pub head: usize,
    /// Importance of each slot before eviction, in position order.
    pub positions: Vec<usize>,
    pub scores: ImportanceVector,
    pub retained: Vec<usize>,
    pub evicted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStep {
    pub seen: usize,
    pub heads: Vec<ReplayHead>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub policy: PolicyConfig,
    /// Always true: replayed evictions cannot influence later rows.
    pub open_loop: bool,
    pub steps: Vec<ReplayStep>,
    /// Evicted slots with position below the policy's sink count.
    pub sink_evictions: usize,
}

/// Feeds a trace through the policy engine exactly as a live run would.
///
/// Rows whose length matches the replay cache are used as is, which is the
/// case when replaying a trace under the policy it was recorded with. Rows
/// spanning every position up to the new token, as recorded under a full
/// cache, are restricted to the retained slots and renormalised: a softmax
/// over a subset of logits equals the renormalised restriction of the full
/// softmax.
pub fn replay(trace: &Trace, cfg: &PolicyConfig) -> Result<ReplayReport> {
    cfg.validate()?;
    let meta = &trace.meta;
    if cfg.norm_order != meta.norm {
        return Err(Error::invalid_config(format!(
            "trace value norms are {} but the policy asks for {}",
            meta.norm, cfg.norm_order
        )));
    }
    let mut caches = ModelCache::new(meta.n_layers, meta.n_heads, cfg.cache_spec(meta.d_head));
    let per_step = meta.n_layers * meta.n_heads;
    let mut report = ReplayReport {
        policy: *cfg,
        open_loop: true,
        steps: Vec::new(),
        sink_evictions: 0,
    };
    // Records are numbered from line 3 of the file.
    let bad = |i: usize, msg: String| Error::InvalidTrace { line: i + 3, msg };

    for chunk_start in (0..trace.records.len()).step_by(per_step.max(1)) {
        let step = caches.seen();
        let chunk = &trace.records[chunk_start..(chunk_start + per_step).min(trace.records.len())];
        if chunk.len() != per_step {
            return Err(bad(chunk_start, format!("step {step} has {} of {per_step} records", chunk.len())));
        }
        for (j, r) in chunk.iter().enumerate() {
            let i = chunk_start + j;
            let (layer, head) = (j / meta.n_heads, j % meta.n_heads);
            if r.step != step || r.position != step {
                return Err(bad(i, format!("expected step {step}, found step {} position {}", r.step, r.position)));
            }
            if r.layer != layer || r.head != head {
                return Err(bad(i, format!("expected layer {layer} head {head}, found {} {}", r.layer, r.head)));
            }
            let cache = caches.head_mut(layer, head);
            cache
                .append_norm_only(r.position, r.value_norm)
                .map_err(|e| bad(i, e.to_string()))?;
            let row = if r.attention_row.len() == cache.len() {
                r.attention_row.clone()
            } else if r.attention_row.len() == r.position + 1 {
                let picked: Vec<f64> = cache.slots().iter().map(|s| r.attention_row[s.position]).collect();
                let total: f64 = picked.iter().sum();
                if total <= 0.0 {
                    return Err(bad(i, "retained slots received no attention".into()));
                }
                picked.into_iter().map(|a| a / total).collect()
            } else {
                return Err(bad(
                    i,
                    format!(
                        "row of length {} fits neither {} cached slots nor {} positions",
                        r.attention_row.len(),
                        cache.len(),
                        r.position + 1
                    ),
                ));
            };
            cache.record_attention(&row).map_err(|e| bad(i, e.to_string()))?;
        }
        caches.advance();

        let seen = caches.seen();
        if seen < meta.prompt_len {
            continue;
        }
        let mut heads = Vec::with_capacity(per_step);
        for cache in caches.heads_mut() {
            let positions = cache.positions();
            let scores = score(cache, cfg)?;
            let result = enforce_budget(cache, cfg, seen)?;
            report.sink_evictions += result.evicted.iter().filter(|&&p| p < cfg.sink_count).count();
            heads.push(ReplayHead {
                layer: cache.layer(),
                head: cache.head(),
                positions,
                scores,
                retained: cache.positions(),
                evicted: result.evicted,
            });
        }
        report.steps.push(ReplayStep { seen, heads });
    }
    Ok(report)
}

/// Parameters for a single-head trace with planted attention sinks.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTraceSpec {
    pub length: usize,
    pub sink_positions: Vec<usize>,
    /// Share of every row given to the sinks, split equally among them.
    pub sink_attention_mass: f64,
    pub sink_value_norm: f64,
    /// Value norms of ordinary tokens are drawn uniformly from this range.
    pub background_norm_range: (f64, f64),
    pub seed: u64,
    /// Recorded head dimension, used only for memory accounting on replay.
    pub value_dim: usize,
    /// Replay starts enforcing budgets once this many tokens are seen.
    pub prompt_len: usize,
}

impl Default for SyntheticTraceSpec {
    fn default() -> Self {
        SyntheticTraceSpec {
            length: 32,
            sink_positions: vec![0, 1],
            sink_attention_mass: 0.8,
            sink_value_norm: 0.0,
            background_norm_range: (0.5, 2.0),
            seed: 0,
            value_dim: 8,
            prompt_len: 1,
        }
    }
}

/// Builds a trace whose sinks absorb a fixed share of every row while
/// carrying (near-)zero value norms.
pub fn synthesize(spec: &SyntheticTraceSpec) -> Result<Trace> {
    let invalid = |m: String| Err(Error::InvalidSpec(m));
    let (lo, hi) = spec.background_norm_range;
    if spec.length == 0 {
        return invalid("length must be at least 1".into());
    }
    if !(spec.sink_attention_mass > 0.0 && spec.sink_attention_mass < 1.0) {
        return invalid(format!("sink attention mass {} outside (0, 1)", spec.sink_attention_mass));
    }
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
        return invalid(format!("background norm range ({lo}, {hi}) is not a valid interval"));
    }
    if !(spec.sink_value_norm.is_finite() && spec.sink_value_norm >= 0.0) {
        return invalid(format!("sink value norm {} must be non-negative", spec.sink_value_norm));
    }
    if spec.sink_positions.is_empty() {
        return invalid("at least one sink position is required".into());
    }
    if let Some(&p) = spec.sink_positions.iter().find(|&&p| p >= spec.length) {
        return invalid(format!("sink position {p} beyond trace length {}", spec.length));
    }
    if spec.value_dim == 0 || spec.prompt_len == 0 {
        return invalid("value_dim and prompt_len must be at least 1".into());
    }

    let mut rng = XorShift64Star::new(spec.seed);
    let is_sink = |p: usize| spec.sink_positions.contains(&p);
    let norms: Vec<f64> = (0..spec.length)
        .map(|p| {
            if is_sink(p) {
                spec.sink_value_norm
            } else {
                rng.uniform(lo, hi)
            }
        })
        .collect();

    let mut records = Vec::with_capacity(spec.length);
    for (t, &value_norm) in norms.iter().enumerate() {
        let sinks = (0..=t).filter(|&p| is_sink(p)).count();
        let others = t + 1 - sinks;
        let weights: Vec<f64> = (0..=t)
            .map(|p| if is_sink(p) { 0.0 } else { rng.uniform(0.05, 1.0) })
            .collect();
        let weight_total: f64 = weights.iter().sum();
        let sink_share = match (sinks, others) {
            (0, _) => 0.0,
            (_, 0) => 1.0 / sinks as f64,
            _ => spec.sink_attention_mass / sinks as f64,
        };
        let rest = 1.0 - sink_share * sinks as f64;
        let row = (0..=t)
            .map(|p| if is_sink(p) { sink_share } else { rest * weights[p] / weight_total })
            .collect();
        records.push(TraceRecord {
            step: t,
            layer: 0,
            head: 0,
            attention_row: row,
            position: t,
            value_norm,
            value_dim: spec.value_dim,
        });
    }
    Ok(Trace {
        meta: TraceMeta {
            prompt_len: spec.prompt_len,
            n_layers: 1,
            n_heads: 1,
            d_head: spec.value_dim,
            norm: NormOrder::L1,
            encoding: FloatEncoding::Hex,
        },
        records,
    })
}
