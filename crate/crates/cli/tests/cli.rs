//! Drives the `toplab` binary end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use toplab::data::{load_corpus, TokenSequence, Vocab};
use toplab::top_target::{oracle_forward_scan, SparseTargets};

/// A model and run small enough to train in well under a second.
const SMALL: &str = r#"
base = "desk_ntp"

[model]
d_model = 16
n_layers = 2
n_heads = 2
max_seq_len = 16
mlp_hidden = 24

[train]
steps = 10
warmup_steps = 2
peak_lr = 0.003
batch_size = 4
eval_every = 5
checkpoint_every = 5
eval_windows = 4
heldout_fraction = 0.1
fused_block_size = 8

[data]
synthetic_bytes = 20000
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Sandbox {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(s.path("small.toml"), SMALL).unwrap();
        s
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn small(&self) -> String {
        self.path("small.toml").display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_toplab"))
            .args(args)
            .current_dir(self.dir.path())
            .env("TOPLAB_OUT_ROOT", self.path("runs"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    /// Runs and asserts the exit code, returning stdout.
    fn expect(&self, code: i32, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(
            out.status.code(),
            Some(code),
            "{args:?}\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn train_small(&self, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.path(out);
        let small = self.small();
        let dir_s = dir.display().to_string();
        let mut args = vec!["train", "--config", small.as_str(), "--out", dir_s.as_str()];
        args.extend_from_slice(extra);
        self.expect(0, &args);
        dir
    }
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let i = text.lines().next().unwrap().split(',').position(|h| h == name).unwrap();
    data_rows(path).iter().map(|r| r.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn desk_preset_ten_steps_gives_ten_metric_rows() {
    let sb = Sandbox::new();
    sb.expect(0, &["train", "--config", "desk_ntp", "--steps", "10"]);
    let run = sb.path("runs/desk_ntp-ntp-s0");
    assert_eq!(data_rows(&run.join("metrics.csv")).len(), 10);
    assert!(run.join("manifest.toml").is_file());
    assert!(run.join("checkpoints/step_000010.ckpt").is_file());
}

#[test]
fn missing_corpus_fails_without_outputs() {
    let sb = Sandbox::new();
    let out = sb.path("never");
    let args = [
        "train",
        "--config",
        &sb.small(),
        "--corpus",
        "does/not/exist.txt",
        "--out",
        out.to_str().unwrap(),
    ];
    let res = sb.run(&args);
    assert_ne!(res.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&res.stderr).contains("does/not/exist.txt"));
    assert!(!out.exists());
}

#[test]
fn configuration_errors_exit_with_one_before_training() {
    let sb = Sandbox::new();
    fs::write(sb.path("typo.toml"), "[train]\nstepz = 3\n").unwrap();
    let out = sb.path("typo-run");
    let res = sb.run(&["train", "--config", "typo.toml", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("stepz"));
    assert!(!out.exists());

    sb.expect(1, &["train", "--config", "no_such_preset"]);
    sb.expect(1, &["train", "--config", &sb.small(), "--objective", "top", "--objective.window", "0"]);
    sb.expect(1, &["train", "--config", &sb.small(), "--objective", "mtp", "--objective.future-tokens", "3"]);
    sb.expect(1, &["train", "--bogus-flag"]);
    sb.expect(0, &["--help"]);
    assert!(!sb.path("runs").exists());
}

#[test]
fn build_targets_matches_the_forward_scan_and_is_idempotent() {
    let sb = Sandbox::new();
    fs::write(sb.path("toy.vocab"), "a\nb\nc\n").unwrap();
    fs::write(sb.path("toy.txt"), "abcabbcacbaa").unwrap();
    let args = [
        "build-targets",
        "--corpus",
        "toy.txt",
        "--window",
        "2",
        "--toy-vocab",
        "toy.vocab",
        "--out",
        "targets/toy.bin",
    ];
    sb.expect(0, &args);
    let first = fs::read(sb.path("targets/toy.bin")).unwrap();
    sb.expect(0, &args);
    assert_eq!(fs::read(sb.path("targets/toy.bin")).unwrap(), first);

    let vocab = Vocab::from_toy_file(&sb.path("toy.vocab")).unwrap();
    let tokens = load_corpus(&sb.path("toy.txt"), &vocab).unwrap();
    assert_eq!(tokens.len(), 12);
    let oracle = oracle_forward_scan(&TokenSequence::padded(&tokens, 2, 3).unwrap(), 3, 2).unwrap();
    let loaded = SparseTargets::load(&sb.path("targets/toy.bin")).unwrap();
    assert!(loaded.densify().bitwise_eq(&oracle));

    let res = sb.run(&["build-targets", "--corpus", "toy.txt", "--window", "0", "--out", "w0.bin"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("window size"));
    assert!(!sb.path("w0.bin").exists());
    sb.expect(2, &["build-targets", "--corpus", "missing.txt", "--window", "2", "--out", "m.bin"]);
}

#[test]
fn compare_builds_one_column_per_run() {
    let sb = Sandbox::new();
    let ntp = sb.train_small("ntp", &[]);
    let mtp = sb.train_small("mtp", &["--objective", "mtp", "--objective.future-tokens", "2"]);
    let top = sb.train_small("top", &["--objective", "top", "--objective.window", "4"]);
    let [ntp, mtp, top] = [ntp, mtp, top].map(|p| p.display().to_string());

    let table = sb.expect(0, &["compare", &top, &ntp, &mtp, "--out", "cmp.csv"]);
    assert_eq!(fs::read_to_string(sb.path("cmp.csv")).unwrap(), table);
    let lines: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(lines[0], vec!["metric", "top", "ntp", "mtp"]);
    assert!(lines.iter().all(|l| l.len() == 4));
    let row = |name: &str| lines.iter().find(|l| l[0] == name).unwrap().clone();
    assert_eq!(row("objective")[1..], ["top(W=4)", "ntp", "mtp(N=2)"]);
    // the baseline is the NTP run even when it is not listed first
    assert_eq!(row("heldout_ntp_delta_vs_baseline")[2], "0");
    assert_eq!(row("train_ntp_delta_vs_baseline")[2], "0");
    let held: Vec<f64> = row("heldout_ntp_head_loss")[1..].iter().map(|v| v.parse().unwrap()).collect();
    let delta: f64 = row("heldout_ntp_delta_vs_baseline")[1].parse().unwrap();
    assert!((delta - (held[0] - held[1])).abs() <= 1e-12);
    assert!(!row("window_agreement")[1].is_empty());

    let single = sb.expect(0, &["compare", &ntp]);
    assert!(single.lines().all(|l| l.split(',').count() == 2));

    let res = sb.run(&["compare", &ntp, "nowhere"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("nowhere"));
}

#[test]
fn window_one_top_loss_equals_top_head_cross_entropy() {
    let sb = Sandbox::new();
    let run = sb.train_small("w1", &["--objective", "top", "--objective.window", "1"]);
    let top = column(&run.join("metrics.csv"), "loss_top");
    let xent = column(&run.join("metrics.csv"), "top_head_xent");
    assert_eq!(top.len(), 10);
    for (a, b) in top.iter().zip(&xent) {
        let (a, b): (f64, f64) = (a.parse().unwrap(), b.parse().unwrap());
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn manifest_alone_reproduces_the_run() {
    let sb = Sandbox::new();
    let first = sb.train_small(
        "first",
        &[
            "--seed",
            "3",
            "--steps",
            "6",
            "--objective",
            "mtp",
            "--objective.future-tokens",
            "2",
            "--deterministic",
        ],
    );
    let manifest = first.join("manifest.toml");
    let second = sb.path("second");
    sb.expect(0, &["train", "--config", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    for f in ["metrics.csv", "eval.csv", "checkpoints/step_000006.ckpt"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("seed = 3") && text.contains("steps = 6") && text.contains("future_tokens = 2"));
}

#[test]
fn resume_flag_continues_a_run() {
    let sb = Sandbox::new();
    let full = sb.train_small("full", &[]);
    let part = sb.train_small("part", &["--steps", "10"]);
    // continue from the mid-run checkpoint into the same directory
    let ckpt = part.join("checkpoints/step_000005.ckpt");
    let part_s = part.display().to_string();
    sb.expect(0, &["train", "--config", &sb.small(), "--out", &part_s, "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(fs::read(full.join("metrics.csv")).unwrap(), fs::read(part.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(full.join("eval.csv")).unwrap(), fs::read(part.join("eval.csv")).unwrap());
}

#[test]
fn eval_and_generate_work_on_a_finished_run() {
    let sb = Sandbox::new();
    let run = sb.train_small("top", &["--objective", "top", "--objective.window", "4"]);
    let ckpt = run.join("checkpoints/step_000010.ckpt");
    let before = data_rows(&run.join("eval.csv")).len();
    let printed = sb.expect(0, &["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(printed.contains("held-out ntp-head loss"));
    let rows = data_rows(&run.join("eval.csv"));
    assert_eq!(rows.len(), before + 1);
    // same checkpoint, same data: the appended row repeats the in-run one
    assert_eq!(rows[rows.len() - 1], rows[rows.len() - 2]);

    let text = sb.expect(
        0,
        &["generate", "--checkpoint", ckpt.to_str().unwrap(), "--prompt", "The ", "--max-new", "5"],
    );
    assert!(text.starts_with("The "));
    sb.expect(2, &["generate", "--checkpoint", "missing.ckpt", "--prompt", "x"]);
}
