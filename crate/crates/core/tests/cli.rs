use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_matmamba"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/shakespeare.txt")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"
[model]
kind = "lm"
n_layers = 2
d_model = 32
d_head = 8
d_state = 8
vocab_size = 256

[train]
lr = 3e-3
warmup_steps = 3
total_steps = 12
batch_size = 2
seq_len = 32
eval_every = 6
eval_batches = 2

[data]
text = "{}"
"#,
        corpus().display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn train(cfg: &Path, out: &Path, seed: &str) {
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn count_params_prints_published_counts() {
    let o = run(&["count-params", "--preset", "lm-130m"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("embed 38,615,040"), "{s}");
    assert!(s.contains("non-embed 90,368,448"), "{s}");
}

#[test]
fn bad_input_is_rejected() {
    let o = run(&["count-params", "--preset", "lm-130m", "--bogus"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--bogus"));

    let o = run(&["count-params", "--preset", "no-such-model"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));

    let o = run(&["frobnicate"]);
    assert!(!o.status.success());
}

#[test]
fn seeded_training_is_reproducible_and_extractable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train(&cfg, &a, "7");
    train(&cfg, &b, "7");
    train(&cfg, &c, "8");
    let ma = std::fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.jsonl")).unwrap());
    assert_ne!(ma, std::fs::read(c.join("metrics.jsonl")).unwrap());
    assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());
    let train_lines = String::from_utf8(ma).unwrap().lines().filter(|l| l.contains("\"kind\":\"train\"")).count();
    assert_eq!(train_lines, 12);

    let ckpt = a.join("model.ckpt");
    let ck = ckpt.to_str().unwrap();

    // mismatched dims length: usage error, nothing written
    let bad = dir.path().join("bad.ckpt");
    let o = run(&["extract", "--checkpoint", ck, "--dims", "16,32,8", "--out", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("usage"));
    assert!(!bad.exists());

    // conflicting flags
    let o = run(&["extract", "--checkpoint", ck, "--dims", "16,8", "--granularity", "8", "--out", "x"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cannot be used with"));

    // a width that is not a multiple of the head size
    let o = run(&["eval", "--checkpoint", ck, "--config", cfg.to_str().unwrap(), "--granularity", "10"]);
    assert_eq!(o.status.code(), Some(2));

    let sub = dir.path().join("sub.ckpt");
    let o = run(&["extract", "--checkpoint", ck, "--dims", "16,8", "--out", sub.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reported = stdout(&o);
    let (sub_model, _) = matmamba::io::checkpoint::load_checkpoint::<f32>(&sub).unwrap();
    assert_eq!(reported.trim(), format!("params {}", matmamba::cli::group_digits(sub_model.num_params())));

    // the standalone submodel evaluates to the same loss as the sliced parent
    let eval = |ckpt: &Path, extra: &[&str]| -> f64 {
        let mut args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", cfg.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        v["loss"].as_f64().unwrap()
    };
    let parent = eval(&ckpt, &["--dims", "16,8"]);
    let standalone = eval(&sub, &[]);
    assert!((parent - standalone).abs() < 1e-5, "{parent} vs {standalone}");

    let o = run(&["generate", "--checkpoint", ck, "--prompt", "To be", "--max-new", "10", "--granularity", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("To be"));

    let rows = dir.path().join("sweep.jsonl");
    let o = run(&[
        "sweep",
        "--checkpoint",
        ck,
        "--config",
        cfg.to_str().unwrap(),
        "--ratios",
        "0.6",
        "--out",
        rows.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let n = std::fs::read_to_string(&rows).unwrap().lines().count();
    assert!(n >= 5, "four uniform rows plus samples, got {n}");
}

#[test]
fn bench_reports_every_granularity() {
    let o = run(&["bench", "--preset", "lm-tiny", "--seq-lens", "16", "--runs", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + 4);
}
