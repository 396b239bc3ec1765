use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kvprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvprune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "model.n_layers = 1\nmodel.n_heads = 2\nmodel.d_head = 4\nmodel.vocab_size = 16\n\
         experiment.prompt_len = 24\nexperiment.gen_steps = 4\nexperiment.repeats = 2\n\
         experiment.budget_ratios = 0.5, 1.0\npolicy.sink_count = 2\n",
    )
    .unwrap();
    path
}

#[test]
fn help_lists_subcommands_and_keys() {
    let out = kvprune(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for word in ["sweep", "compare", "trace", "--config", "--seed", "--out"] {
        assert!(text.contains(word), "help is missing {word}");
    }
    for (key, _) in kvprune_core::harness::CONFIG_KEYS {
        assert!(text.contains(key), "help is missing {key}");
    }
    let sub = String::from_utf8(kvprune(&["trace", "--help"]).stdout).unwrap();
    for word in ["record", "replay", "synth"] {
        assert!(sub.contains(word));
    }
}

#[test]
fn missing_config_exits_2_with_path() {
    let out = kvprune(&["--config", "/definitely/not/here.cfg", "sweep"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("/definitely/not/here.cfg"));
}

#[test]
fn unknown_key_exits_2_naming_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "# header\nmodel.n_heads = 2\nmodel.colour = blue\n").unwrap();
    let out = kvprune(&["--config", path.to_str().unwrap(), "sweep"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("model.colour"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn sweep_and_compare_write_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let args = ["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];

    let out = kvprune(&[&args[..], &["sweep"]].concat());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 6 * 2 * 2);

    let out = kvprune(&[&args[..], &["compare"]].concat());
    assert_eq!(out.status.code(), Some(0));
    let compare = fs::read_to_string(out_dir.join("compare.csv")).unwrap();
    assert_eq!(compare.lines().count(), 1 + 6 * 2);

    let again = kvprune(&[&args[..], &["--seed", "1", "sweep"]].concat());
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(fs::read_to_string(out_dir.join("sweep.csv")).unwrap(), sweep);
}

#[test]
fn seed_flag_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |seed: &str, name: &str| {
        let out_dir = dir.path().join(name);
        let out = kvprune(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            seed,
            "sweep",
        ]);
        assert_eq!(out.status.code(), Some(0));
        fs::read_to_string(out_dir.join("sweep.csv")).unwrap()
    };
    let a = run("1", "a");
    let b = run("9", "b");
    assert_ne!(a, b);
    assert!(b.contains(",9,"));
}

#[test]
fn trace_record_replay_and_synth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let trace = dir.path().join("live.kvt");
    let out = kvprune(&["--config", cfg.to_str().unwrap(), "trace", "record", "--file", trace.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(&trace).unwrap().starts_with("KVTRACE v1\n"));

    let out = kvprune(&[
        "--config",
        cfg.to_str().unwrap(),
        "trace",
        "replay",
        trace.to_str().unwrap(),
        "--policy",
        "scissorhands+vatp",
        "--ratio",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("sink evictions: 0"), "{text}");

    let synth = dir.path().join("synth.kvt");
    let out = kvprune(&["trace", "synth", "--file", synth.to_str().unwrap(), "--length", "40"]);
    assert_eq!(out.status.code(), Some(0));
    let out = kvprune(&["trace", "replay", synth.to_str().unwrap(), "--policy", "h2o", "--ratio", "0.5"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn corrupt_trace_fails_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.kvt");
    fs::write(&path, "KVTRACE v1\nmeta prompt_len=1 n_layers=1 n_heads=1 d_head=4 norm=l1 encoding=dec\nv1 0 0 0 oops 0 1.0 4\n").unwrap();
    let out = kvprune(&["trace", "replay", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 3"));
}
