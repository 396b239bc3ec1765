//! `kvprune`: budget sweeps, VATP comparisons and attention traces.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use kvprune_core::generation::{generate_with, GenerateOptions};
use kvprune_core::harness::{self, ExperimentConfig, CONFIG_KEYS};
use kvprune_core::trace::{self, SyntheticTraceSpec, Trace};
use kvprune_core::{Decoder, Error, PolicyConfig};

/// Like `println!`, but a closed stdout (e.g. piping into `head`) is not an error.
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn config_help() -> String {
    let mut s = String::from(
        "Config file: one `key = value` per line, `#` comments, comma-separated lists.\nKeys:\n",
    );
    for (key, desc) in CONFIG_KEYS {
        s.push_str(&format!("  {key:<26} {desc}\n"));
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "kvprune", version, about = "KV-cache eviction simulator", after_help = config_help())]
struct Cli {
    /// Experiment config file; the desk preset is used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `model.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `experiment.output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every policy at every budget ratio and write sweep.csv.
    Sweep,
    /// Count per-seed wins of each policy against its attention-only baseline.
    Compare,
    /// Record, replay or synthesize attention traces.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Debug, Subcommand)]
enum TraceCommand {
    /// Record a full-cache generation of the first seed.
    Record {
        /// Trace file; defaults to `<out>/trace.kvt`.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Write floats as decimal text instead of exact hex bits.
        #[arg(long)]
        decimal: bool,
    },
    /// Replay a trace through a policy without re-running the decoder.
    Replay {
        file: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Write a synthetic single-head trace with planted sinks.
    Synth {
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        length: usize,
        #[arg(long, default_value_t = 0.8)]
        sink_mass: f64,
        #[arg(long, default_value_t = 0.0)]
        sink_norm: f64,
    },
}

#[derive(Debug, Args)]
struct PolicyArgs {
    /// Policy label such as `h2o+vatp`.
    #[arg(long, default_value = "h2o+vatp")]
    policy: String,
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
}

fn load_config(cli: &Cli) -> kvprune_core::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn policy_from(args: &PolicyArgs, cfg: &ExperimentConfig) -> anyhow::Result<PolicyConfig> {
    let mut p: PolicyConfig = args.policy.parse()?;
    if let Some(base) = cfg.policies.first() {
        p.sink_count = base.sink_count;
        p.local_window = base.local_window;
        p.history_window = base.history_window;
        p.norm_order = base.norm_order;
    }
    let p = p.with_ratio(args.ratio);
    p.validate()?;
    Ok(p)
}

fn trace_path(file: &Option<PathBuf>, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    if let Some(f) = file {
        return Ok(f.clone());
    }
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    Ok(cfg.output_dir.join("trace.kvt"))
}

fn run_trace(cmd: &TraceCommand, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    match cmd {
        TraceCommand::Record { file, decimal } => {
            let model = Decoder::build(cfg.model)?;
            let prompt = harness::prompt_for_seed(cfg.model.seed, cfg.prompt_len, cfg.model.vocab_size);
            let opts = GenerateOptions { keep_steps: true, forced: None };
            let full = PolicyConfig::full();
            let gen = generate_with(&model, &prompt, &full, cfg.gen_steps, opts)?;
            let mut t = Trace::from_generation(&gen, &cfg.model)?;
            if *decimal {
                t.meta.encoding = trace::FloatEncoding::Decimal;
            }
            let path = trace_path(file, cfg)?;
            t.save(&path)?;
            outln!("wrote {} records to {}", t.records.len(), path.display());
        }
        TraceCommand::Replay { file, policy } => {
            let t = Trace::load(file)?;
            let mut p = policy_from(policy, cfg)?;
            p.norm_order = t.meta.norm;
            let report = trace::replay(&t, &p)?;
            outln!("policy {} ratio {} (open loop)", p.label(), p.budget_ratio);
            outln!("{:>6} {:>8} {:>8}", "seen", "retained", "evicted");
            for step in &report.steps {
                let retained: usize = step.heads.iter().map(|h| h.retained.len()).sum();
                let evicted: usize = step.heads.iter().map(|h| h.evicted.len()).sum();
                outln!("{:>6} {:>8} {:>8}", step.seen, retained, evicted);
            }
            outln!("sink evictions: {}", report.sink_evictions);
        }
        TraceCommand::Synth { file, length, sink_mass, sink_norm } => {
            let spec = SyntheticTraceSpec {
                length: *length,
                sink_attention_mass: *sink_mass,
                sink_value_norm: *sink_norm,
                seed: cfg.model.seed,
                ..SyntheticTraceSpec::default()
            };
            let t = trace::synthesize(&spec)?;
            let path = trace_path(file, cfg)?;
            t.save(&path)?;
            outln!("wrote {} records to {}", t.records.len(), path.display());
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Sweep => {
            let report = harness::run_sweep(&cfg)?;
            let csv = cfg.output_dir.join(harness::sweep::SWEEP_CSV);
            outln!("{} cells written to {}", report.cells.len(), csv.display());
        }
        Command::Compare => {
            let report = harness::run_compare(&cfg)?;
            outln!("{}", report.to_table().trim_end());
            let csv = cfg.output_dir.join(harness::sweep::COMPARE_CSV);
            outln!("written to {}", csv.display());
        }
        Command::Trace(cmd) => run_trace(cmd, &cfg)?,
    }
    Ok(())
}

fn is_config_error(err: &anyhow::Error, config: Option<&Path>) -> bool {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) => true,
        Some(Error::Io { path, .. }) => config == Some(path.as_path()),
        _ => false,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err, cli.config.as_deref()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
