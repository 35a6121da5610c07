//! End-to-end CLI pipeline: train -> attack -> certify -> diagnose ->
//! corrupt-eval -> report, twice, checking determinism and exit codes.

use equirobust::report::report_digest;
use std::ffi::OsString;
use std::path::Path;

fn cli(args: &[&str]) -> i32 {
    let mut full: Vec<OsString> = vec!["equirobust".into()];
    full.extend(args.iter().map(OsString::from));
    equirobust::cli::run(full)
}

fn write_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"
run_id = "pipeline"
out_dir = "{out}"

[dataset]
source = "synthetic"
kind = "oriented_bars"
n_train = 32
n_eval = 16
image_size = 16
num_classes = 4

[[model]]
architecture_id = "baseline"
channel_plan = [4, 8, 8, 8]

[train]
epochs = 2
batch_size = 16
seeds = [0]

[attack]
eps_grid = [0.01, 0.03]
pgd_steps = 3

[certify]
n_samples = 2
batches = 4
samples_per_batch = 8

[diagnose]
probe = 2
trials = 10

[corruptions]
kinds = ["gaussian_noise"]
severities = [2]
eps = [0.01]
"#,
        out = out.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run_pipeline(cfg: &Path, out: &Path) -> String {
    assert_eq!(cli(&["train", "--config", cfg.to_str().unwrap()]), 0);
    let ckpt = out.join("checkpoints/baseline-d4-s0-e2.ckpt");
    assert!(ckpt.exists(), "missing checkpoint {}", ckpt.display());
    let c = cfg.to_str().unwrap();
    let k = ckpt.to_str().unwrap();
    assert_eq!(cli(&["attack", "--config", c, "--checkpoint", k]), 0);
    assert_eq!(cli(&["certify", "--config", c, "--checkpoint", k]), 0);
    assert_eq!(cli(&["diagnose", "--config", c, "--checkpoint", k]), 0);
    assert_eq!(cli(&["corrupt-eval", "--config", c, "--checkpoint", k]), 0);
    assert_eq!(cli(&["report", "--config", c]), 0);
    assert!(out.join("summary.csv").exists());
    assert!(out.join("resolved-config.toml").exists());
    report_digest(&out.join("report.jsonl")).unwrap()
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let cfg_a = write_config(&dir.path().join("."), &out_a);
    let d_a = run_pipeline(&cfg_a, &out_a);
    std::fs::remove_file(&cfg_a).unwrap();
    let cfg_b = write_config(&dir.path().join("."), &out_b);
    let d_b = run_pipeline(&cfg_b, &out_b);
    assert_eq!(d_a, d_b, "pipeline report digests differ across reruns");
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // missing required flag
    assert_eq!(cli(&["train"]), 1);
    // nonexistent config
    assert_eq!(cli(&["train", "--config", "/nonexistent.toml"]), 1);
    // malformed config reports a position
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[dataset]\nsource = \"synthetic\"\nnope = 1\n").unwrap();
    assert_eq!(cli(&["train", "--config", bad.to_str().unwrap()]), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &out);
    // report before any rows exist
    assert_eq!(cli(&["report", "--config", cfg.to_str().unwrap()]), 2);
    // attack against a missing checkpoint
    assert_eq!(
        cli(&[
            "attack",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            "/nonexistent.ckpt"
        ]),
        2
    );
}

#[test]
fn seed_override_changes_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &out);
    let c = cfg.to_str().unwrap();
    assert_eq!(cli(&["train", "--config", c]), 0);
    assert_eq!(cli(&["train", "--config", c, "--seed", "9"]), 0);
    assert!(out.join("checkpoints/baseline-d4-s0-e2.ckpt").exists());
    assert!(out.join("checkpoints/baseline-d4-s9-e2.ckpt").exists());
}
