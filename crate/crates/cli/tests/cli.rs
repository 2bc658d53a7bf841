use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gist(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gist"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GIST_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TRAIN_CONFIG: &str = r#"{
  "seed": 11,
  "n_g": 2,
  "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 64},
  "pretrain": {"name": "pretrain", "token_budget": 2000, "batch_size": 4, "max_seq_len": 64,
    "max_lr": 0.003, "min_lr": 0.0003, "warmup_steps": 2, "schedule": "cosine", "max_grad_norm": 1.0, "freeze": "none"},
  "stages": [
    {"name": "warmup_gist", "token_budget": 800, "batch_size": 4, "max_seq_len": 64,
     "max_lr": 0.003, "min_lr": 0.0003, "warmup_steps": 1, "schedule": "cosine", "max_grad_norm": 1.0, "freeze": "all_but_gist_rows"},
    {"name": "finetune", "token_budget": 2000, "batch_size": 4, "max_seq_len": 64,
     "max_lr": 0.003, "min_lr": 0.0003, "warmup_steps": 2, "schedule": "cosine", "max_grad_norm": 1.0, "freeze": "none"},
    {"name": "cold_down", "token_budget": 800, "batch_size": 4, "max_seq_len": 64,
     "max_lr": 0.0003, "min_lr": 0.0, "warmup_steps": 0, "schedule": "linear", "max_grad_norm": 1.0, "freeze": "none"}
  ]
}"#;

/// synth-corpus → preprocess → train → eval inside `dir`.
fn run_all(dir: &Path) {
    fs::write(dir.join("train.json"), TRAIN_CONFIG).unwrap();
    ok(&gist(&["--quiet", "synth-corpus", "--out", "corp", "--docs", "12", "--seed", "3"], dir));
    ok(&gist(&["--quiet", "preprocess", "--corpus", "corp", "--out", "pre", "--ng", "2", "--scheme", "word"], dir));
    ok(&gist(&["--quiet", "train", "--config", "train.json", "--corpus", "pre", "--out", "run"], dir));
    ok(&gist(
        &[
            "--quiet", "eval", "--ckpt", "run/ckpt/final", "--corpus", "corp", "--ng", "1,2,4", "--prefixes", "16,32",
            "--out", "eval/report.json",
        ],
        dir,
    ));
}

#[test]
fn no_arguments_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gist(&[], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gist(&["--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(gist(&["mask-dump", "--text", "a.", "--ng", "x"], dir.path()).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gist(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = gist(&["eval", "--ckpt", "missing", "--corpus", ".", "--out", "r.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = gist(&["mask-dump", "--text", "a.", "--ng", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mask_dump_ascii() {
    let dir = tempfile::tempdir().unwrap();
    let out = gist(&["mask-dump", "--text", "Hi. Go!", "--ng", "1"], dir.path());
    ok(&out);
    let expected = "\
#.....
##....
###...
..##..
..###.
..####
density 0.714286
block q_start q_end k_start k_end kind
0 0 3 0 3 causal
1 3 6 2 3 full
2 3 6 3 6 causal
";
    assert_eq!(String::from_utf8(out.stdout).unwrap(), expected);
}

#[test]
fn mask_dump_pgm_and_overwrite_guard() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["mask-dump", "--text", "a b. c", "--ng", "2", "--format", "pgm", "--out", "m.pgm"];
    ok(&gist(&args, dir.path()));
    let bytes = fs::read(dir.path().join("m.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n"));
    assert_eq!(gist(&args, dir.path()).status.code(), Some(2));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&gist(&forced, dir.path()));
}

#[test]
fn pipeline_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path());
    run_all(b.path());
    for file in ["run/metrics.csv", "eval/report.json", "eval/curves.csv", "pre/shard.bin", "run/ckpt/final/tensors.bin"] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between runs");
    }
    let metrics = fs::read_to_string(a.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,stage,lr,loss_all,loss_regular,grad_norm,tokens_seen"));
    for stage in ["pretrain", "warmup_gist", "finetune", "cold_down"] {
        assert!(metrics.contains(&format!(",{stage},")), "no {stage} rows");
    }

    // Generation from the trained checkpoint, greedy and sampled.
    let out = gist(
        &["generate", "--ckpt", "run/ckpt/final", "--prompt", "ant bay .", "--max-new-tokens", "12", "--greedy", "--report-cache"],
        a.path(),
    );
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let report: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert!(report["ratio"].as_f64().unwrap() >= 1.0);
    let sample = |seed: &str| {
        let out = gist(
            &["generate", "--ckpt", "run/ckpt/final", "--bos", "--max-new-tokens", "12", "--temp", "1.0", "--seed", seed],
            a.path(),
        );
        ok(&out);
        out.stdout
    };
    assert_eq!(sample("4"), sample("4"));
}

#[test]
fn resume_and_overwrite_rules() {
    let dir = tempfile::tempdir().unwrap();
    run_all(dir.path());
    let before = fs::read(dir.path().join("run/metrics.csv")).unwrap();
    // A second plain run into the same directory is refused.
    let again = gist(&["--quiet", "train", "--config", "train.json", "--corpus", "pre", "--out", "run"], dir.path());
    assert_eq!(again.status.code(), Some(2));
    // Resuming a finished run changes nothing.
    ok(&gist(&["--quiet", "train", "--config", "train.json", "--corpus", "pre", "--out", "run", "--resume"], dir.path()));
    assert_eq!(fs::read(dir.path().join("run/metrics.csv")).unwrap(), before);
    // Resuming under a different config is refused.
    fs::write(dir.path().join("other.json"), TRAIN_CONFIG.replace("\"seed\": 11", "\"seed\": 12")).unwrap();
    let out = gist(&["--quiet", "train", "--config", "other.json", "--corpus", "pre", "--out", "run", "--resume"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn label_period_adds_sentences() {
    let dir = tempfile::tempdir().unwrap();
    let corp = dir.path().join("corp");
    fs::create_dir(&corp).unwrap();
    fs::write(corp.join("a.txt"), "Is this good? Yes it is.\nlabel: positive\n").unwrap();
    let args = |out: &'static str, extra: bool| {
        let mut v = vec!["--quiet", "preprocess", "--corpus", "corp", "--out", out, "--ng", "1", "--scheme", "word"];
        if extra {
            v.push("--label-period");
        }
        v
    };
    ok(&gist(&args("plain", false), dir.path()));
    ok(&gist(&args("labelled", true), dir.path()));
    let positions = |d: &str| {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(d).join("preprocess.json")).unwrap()).unwrap();
        v["positions"].as_u64().unwrap()
    };
    // One extra period token and one extra gist.
    assert_eq!(positions("labelled"), positions("plain") + 2);
}
