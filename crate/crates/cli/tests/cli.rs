use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn snurnnt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snurnnt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const CONFIG: &str = r#"
init_seed = 3

[model]
input_size = 6
vocab_size = 4
joint_dim = 8
blank_bias = 0.0

[model.encoder]
variant = "ssnu-o-r"
layers = 1
units = 6

[model.prediction]
variant = "ssnu-a-r"
units = 6

[training]
peak_lr = 3e-3
warmup_epochs = 1
decay_epochs = 1
batch_size = 4
seed = 5

[paths]
train = "train.jsonl"
"#;

/// Small dataset plus config in a fresh directory.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = snurnnt(
        dir.path(),
        &[
            "gen-data", "--out", "train.jsonl", "--utterances", "12", "--vocab", "4", "--feature-dim", "6",
            "--labels", "2,4", "--heldout", "5", "--heldout-out", "held.jsonl",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--config", "run.toml", "--out", out];
    args.extend_from_slice(extra);
    let result = snurnnt(dir, &args);
    assert_eq!(code(&result), 0, "{}", stderr(&result));
    dir.join(out).join("model.ckpt")
}

fn decode(dir: &Path, ckpt: &Path, extra: &[&str]) -> String {
    let mut args = vec!["decode", "--checkpoint", ckpt.to_str().unwrap(), "--data", "held.jsonl"];
    args.extend_from_slice(extra);
    let out = snurnnt(dir, &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    stdout(&out)
}

fn mean_log_prob(jsonl: &str) -> f64 {
    let values: Vec<f64> = jsonl
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["log_prob"].as_f64().unwrap())
        .collect();
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn missing_data_file_is_named() {
    let dir = workspace();
    let out = snurnnt(dir.path(), &["train", "--config", "run.toml", "--out", "o", "--data", "absent.jsonl"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("absent.jsonl"), "{}", stderr(&out));
}

#[test]
fn fixed_seed_reproduces_checkpoint_bytes() {
    let dir = workspace();
    let a = train(dir.path(), "a", &[]);
    let b = train(dir.path(), "b", &[]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    let log = std::fs::read_to_string(dir.path().join("a/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,lr,loss,token_error\n"));
    assert_eq!(log.lines().count(), 3);
    assert!(dir.path().join("a/checkpoints/epoch_002.ckpt").exists());
}

#[test]
fn run_record_embeds_config_hash() {
    let dir = workspace();
    let out = snurnnt(dir.path(), &["train", "--config", "run.toml", "--out", "r"]);
    assert_eq!(code(&out), 0);
    let line = stderr(&out).lines().find(|l| l.starts_with("config sha256 ")).unwrap().to_string();
    let hash = line.trim_start_matches("config sha256 ");
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/run.json")).unwrap()).unwrap();
    assert_eq!(record["config_sha256"].as_str().unwrap(), hash);
}

#[test]
fn beam_width_one_equals_greedy() {
    let dir = workspace();
    let ckpt = train(dir.path(), "m", &[]);
    let greedy = decode(dir.path(), &ckpt, &["--mode", "greedy"]);
    let beam = decode(dir.path(), &ckpt, &["--mode", "beam", "--beam-width", "1"]);
    assert_eq!(greedy, beam);
    assert_eq!(greedy.lines().count(), 5);
    let wide = decode(dir.path(), &ckpt, &["--mode", "beam", "--beam-width", "16"]);
    assert!(mean_log_prob(&wide) >= mean_log_prob(&greedy) - 1e-12);
}

#[test]
fn blank_biased_untrained_model_emits_nothing() {
    let dir = workspace();
    let ckpt = train(dir.path(), "u", &["--set", "model.blank_bias=20.0", "--max-epochs", "0"]);
    let out = decode(dir.path(), &ckpt, &[]);
    for line in out.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["labels"], serde_json::json!([]), "{line}");
    }
}

#[test]
fn decode_rejects_mismatched_config() {
    let dir = workspace();
    let ckpt = train(dir.path(), "m", &["--max-epochs", "0"]);
    let out = snurnnt(
        dir.path(),
        &[
            "decode", "--config", "run.toml", "--set", "model.joint_dim=9", "--checkpoint", ckpt.to_str().unwrap(),
            "--data", "held.jsonl",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("mismatch"), "{}", stderr(&out));
}

#[test]
fn full_size_counts_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = snurnnt(dir.path(), &["profile"]);
    assert_eq!(code(&out), 0);
    let csv = stdout(&out);
    assert!(csv.contains("LSTM,encoder,54200320,54192640,100,100"));
    assert!(csv.contains("LSTM,prediction,2393088,2392320,100,100"));
    assert!(csv.contains("sSNU R,prediction,598272,599040,25,25"));
    assert_eq!(stdout(&snurnnt(dir.path(), &["count"])), csv);
}

#[test]
fn profile_timing_rows_per_length() {
    let dir = workspace();
    let out = snurnnt(
        dir.path(),
        &["profile", "--config", "run.toml", "--lengths", "100,200,388", "--repeats", "10", "--out", "prof"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let timing = std::fs::read_to_string(dir.path().join("prof/timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 4);
    assert!(timing.lines().nth(3).unwrap().contains(",388,"));
    assert!(dir.path().join("prof/counts.csv").exists());
    let bad = snurnnt(dir.path(), &["profile", "--lengths", "100,0"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn gradcheck_passes_and_validates_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = snurnnt(dir.path(), &["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("PASS")).count(), 10);
    let out = snurnnt(dir.path(), &["gradcheck", "--tol", "0"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn corrupted_backward_rule_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = snurnnt(dir.path(), &["gradcheck", "--corrupt-op", "sigmoid"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("faulty backward rule: sigmoid"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = workspace();
    let text = CONFIG.replace("[paths]", "[paths]\nmodel_dir = \"x\"");
    std::fs::write(dir.path().join("bad.toml"), text).unwrap();
    let out = snurnnt(dir.path(), &["count", "--config", "bad.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("model_dir"), "{}", stderr(&out));
    let out = snurnnt(dir.path(), &["count", "--config", "run.toml", "--set", "training.momentum=0.9"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn divergence_has_its_own_exit_code() {
    let dir = workspace();
    let out = snurnnt(
        dir.path(),
        &["train", "--config", "run.toml", "--out", "d", "--set", "training.peak_lr=1e300"],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}
