//! Flat `key = value` experiment configuration.
//!
//! One setting per line, dotted keys, `#` starts a comment. Lists are comma
//! separated. Every key is optional and defaults to the desk preset.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::decoder::ModelConfig;
use crate::error::{Error, Result};
use crate::math::NormOrder;
use crate::policy::{PolicyConfig, DEFAULT_HISTORY_WINDOW, DEFAULT_LOCAL_WINDOW, DEFAULT_SINK_COUNT};

/// Every accepted key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("model.n_layers", "decoder layers (default 2)"),
    ("model.n_heads", "attention heads per layer (default 4)"),
    ("model.d_head", "head dimension (default 8)"),
    ("model.d_model", "residual width; must equal n_heads * d_head (derived when omitted)"),
    ("model.vocab_size", "vocabulary size, at least 2 (default 64)"),
    ("model.seed", "base seed; repeat i uses seed + i (default 1)"),
    ("model.sink_mode", "plant attention sinks at positions 0 and 1 (default false)"),
    ("experiment.prompt_len", "prompt tokens per run (default 256)"),
    ("experiment.gen_steps", "generated tokens per run (default 64)"),
    ("experiment.repeats", "number of seeds (default 20)"),
    ("experiment.budget_ratios", "comma-separated ratios in (0, 1] (default 0.25, 0.5, 0.75, 1.0)"),
    ("experiment.output_dir", "directory for CSV reports (default runs/default)"),
    ("policies", "comma-separated labels: full, streamllm, h2o, h2o+vatp, scissorhands, scissorhands+vatp"),
    ("policy.sink_count", "first F positions kept by StreamLLM and the +vatp variants (default 20)"),
    ("policy.local_window", "Scissorhands local window (default 10)"),
    ("policy.history_window", "Scissorhands score window w (default 400)"),
    ("policy.norm", "value norm for +vatp: l1, l2 or linf (default l1)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub prompt_len: usize,
    pub gen_steps: usize,
    /// Budget ratios are filled in per sweep cell.
    pub policies: Vec<PolicyConfig>,
    pub budget_ratios: Vec<f64>,
    pub repeats: usize,
    pub output_dir: PathBuf,
}

fn default_policies() -> Vec<PolicyConfig> {
    ["full", "streamllm", "h2o", "h2o+vatp", "scissorhands", "scissorhands+vatp"]
        .iter()
        .map(|l| l.parse().expect("built-in labels parse"))
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            prompt_len: 256,
            gen_steps: 64,
            policies: default_policies(),
            budget_ratios: vec![0.25, 0.5, 0.75, 1.0],
            repeats: 20,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_usize(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut d_model = None;
        let mut labels: Option<Vec<String>> = None;
        let (mut sink_count, mut local_window, mut history_window, mut norm) =
            (DEFAULT_SINK_COUNT, DEFAULT_LOCAL_WINDOW, DEFAULT_HISTORY_WINDOW, NormOrder::L1);
        let mut seen = HashSet::new();

        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::invalid_config(format!("line {lineno}: {msg}"));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            if !CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            let res: std::result::Result<(), String> = (|| {
                match key {
                    "model.n_layers" => cfg.model.n_layers = parse_usize(value)?,
                    "model.n_heads" => cfg.model.n_heads = parse_usize(value)?,
                    "model.d_head" => cfg.model.d_head = parse_usize(value)?,
                    "model.d_model" => d_model = Some(parse_usize(value)?),
                    "model.vocab_size" => cfg.model.vocab_size = parse_usize(value)?,
                    "model.seed" => {
                        cfg.model.seed = value.parse().map_err(|_| format!("bad seed `{value}`"))?
                    }
                    "model.sink_mode" => cfg.model.sink_mode = parse_bool(value)?,
                    "experiment.prompt_len" => cfg.prompt_len = parse_usize(value)?,
                    "experiment.gen_steps" => cfg.gen_steps = parse_usize(value)?,
                    "experiment.repeats" => cfg.repeats = parse_usize(value)?,
                    "experiment.budget_ratios" => {
                        cfg.budget_ratios = parse_list(value)
                            .into_iter()
                            .map(|r| r.parse::<f64>().map_err(|_| format!("bad ratio `{r}`")))
                            .collect::<std::result::Result<_, _>>()?
                    }
                    "experiment.output_dir" => cfg.output_dir = PathBuf::from(value),
                    "policies" => labels = Some(parse_list(value).into_iter().map(String::from).collect()),
                    "policy.sink_count" => sink_count = parse_usize(value)?,
                    "policy.local_window" => local_window = parse_usize(value)?,
                    "policy.history_window" => history_window = parse_usize(value)?,
                    "policy.norm" => norm = value.parse().map_err(|e: Error| e.to_string())?,
                    _ => unreachable!("key list checked above"),
                }
                Ok(())
            })();
            res.map_err(|m| err(format!("`{key}`: {m}")))?;
        }

        cfg.model.d_model = d_model.unwrap_or(cfg.model.n_heads * cfg.model.d_head);
        if let Some(labels) = labels {
            cfg.policies = labels
                .iter()
                .map(|l| l.parse::<PolicyConfig>())
                .collect::<Result<_>>()?;
        }
        for p in &mut cfg.policies {
            p.sink_count = sink_count;
            p.local_window = local_window;
            p.history_window = history_window;
            p.norm_order = norm;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, 0, e))?;
        ExperimentConfig::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::invalid_config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.prompt_len == 0 {
            return Err(Error::invalid_config("prompt_len must be at least 1"));
        }
        if self.repeats == 0 {
            return Err(Error::invalid_config("repeats must be at least 1"));
        }
        if self.budget_ratios.is_empty() || self.policies.is_empty() {
            return Err(Error::invalid_config("need at least one policy and one budget ratio"));
        }
        for &r in &self.budget_ratios {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid_config(format!("budget ratio {r} outside (0, 1]")));
            }
        }
        for p in &self.policies {
            p.validate()?;
        }
        Ok(())
    }

    /// Canonical text form; parses back to the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let p = self.policies.first().copied().unwrap_or_else(PolicyConfig::full);
        let mut s = String::new();
        let ratios: Vec<String> = self.budget_ratios.iter().map(|r| format!("{r:?}")).collect();
        let labels: Vec<String> = self.policies.iter().map(PolicyConfig::label).collect();
        let _ = writeln!(s, "model.n_layers = {}", m.n_layers);
        let _ = writeln!(s, "model.n_heads = {}", m.n_heads);
        let _ = writeln!(s, "model.d_head = {}", m.d_head);
        let _ = writeln!(s, "model.d_model = {}", m.d_model);
        let _ = writeln!(s, "model.vocab_size = {}", m.vocab_size);
        let _ = writeln!(s, "model.seed = {}", m.seed);
        let _ = writeln!(s, "model.sink_mode = {}", m.sink_mode);
        let _ = writeln!(s, "experiment.prompt_len = {}", self.prompt_len);
        let _ = writeln!(s, "experiment.gen_steps = {}", self.gen_steps);
        let _ = writeln!(s, "experiment.repeats = {}", self.repeats);
        let _ = writeln!(s, "experiment.budget_ratios = {}", ratios.join(", "));
        let _ = writeln!(s, "experiment.output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "policies = {}", labels.join(", "));
        let _ = writeln!(s, "policy.sink_count = {}", p.sink_count);
        let _ = writeln!(s, "policy.local_window = {}", p.local_window);
        let _ = writeln!(s, "policy.history_window = {}", p.history_window);
        let _ = writeln!(s, "policy.norm = {}", p.norm_order);
        s
    }
}
