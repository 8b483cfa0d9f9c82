//! End-to-end tests of the `tracc` binary: exit codes, the trailing status
//! line, artifact files, determinism, and the checkpoint/resume flow.

use std::path::Path;
use std::process::{Command, Output};
use tracc::model::write_cifar_binary;

fn tracc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Last stdout line, which every command must make machine-parseable.
fn status_line(o: &Output) -> String {
    let s = stdout(o);
    s.lines().last().unwrap_or("").to_string()
}

fn assert_exit(o: &Output, code: i32) {
    assert_eq!(
        o.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// A small config that trains in well under a second.
fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(
        &p,
        r#"
seed = 11

[network]
name = "small"
description = "4C3-P-FC"
input = [32, 32, 3]
num_classes = 10

[training]
batch_size = 4
learning_rate = 0.05
momentum = 0.5
epochs = 2

[hardware]
pox = 4
poy = 4
pof = 4
tile_ox = 8
tile_oy = 8
tile_of = 4
tile_if = 3

[dataset]
source = "synthetic:9:48"
"#,
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn compile_writes_plan_artifacts_and_reports_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = small_config(dir.path());
    let o = tracc(&["compile", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_exit(&o, 0);
    let status = status_line(&o);
    assert!(status.starts_with("tracc-status: command=compile ok=true"), "{status}");
    assert!(out.join("plan.toml").is_file());
    assert!(out.join("schedule.csv").is_file());

    // Repeat runs are byte-identical.
    let plan1 = std::fs::read(out.join("plan.toml")).unwrap();
    let o2 = tracc(&["compile", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_exit(&o2, 0);
    assert_eq!(plan1, std::fs::read(out.join("plan.toml")).unwrap());
}

#[test]
fn builtin_network_compiles_with_the_published_array_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = tracc(&["compile", "--network", "cifar10_1x", "--out", out.to_str().unwrap()]);
    assert_exit(&o, 0);
    assert!(stdout(&o).contains("1024"), "array size appears in the summary:\n{}", stdout(&o));
}

#[test]
fn config_errors_exit_2() {
    // Missing file.
    let o = tracc(&["compile", "--config", "/nonexistent/x.toml"]);
    assert_exit(&o, 2);
    // Neither config nor builtin network.
    let o = tracc(&["compile"]);
    assert_exit(&o, 2);
    assert!(status_line(&o).contains("ok=false"), "{}", status_line(&o));
    // Unknown builtin.
    let o = tracc(&["compile", "--network", "nope"]);
    assert_exit(&o, 2);
    // Bad override key.
    let o = tracc(&["compile", "--network", "cifar10_1x", "--set", "no.such.key=1"]);
    assert_exit(&o, 2);
}

#[test]
fn infeasible_plans_exit_3() {
    let o = tracc(&[
        "compile",
        "--network",
        "cifar10_1x",
        "--set",
        "hardware.buffer_budget_bits=1000",
        "--set",
        "hardware.auto_tile=false",
    ]);
    assert_exit(&o, 3);
    let status = status_line(&o);
    assert!(status.contains("ok=false"), "{status}");
}

#[test]
fn dataset_network_shape_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = tracc(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "network.input=[16,16,3]",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_exit(&o, 2);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("32x32x3"),
        "error names the dataset geometry: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn train_writes_checkpoints_and_epoch_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(dir.path());
    let o = tracc(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_exit(&o, 0);
    assert!(status_line(&o).starts_with("tracc-status: command=train ok=true"));
    assert!(out.join("epoch_001.ckpt").is_file());
    assert!(out.join("epoch_002.ckpt").is_file());
    assert!(out.join("last.ckpt").is_file());
    let csv = std::fs::read_to_string(out.join("epochs.csv")).unwrap();
    assert!(csv.starts_with("epoch,batches,train_images,mean_loss"), "{csv}");
    assert_eq!(csv.lines().count(), 3, "header plus one row per epoch:\n{csv}");
}

#[test]
fn resume_reproduces_the_uninterrupted_run_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let straight = dir.path().join("straight");
    let o = tracc(&["train", "--config", &cfg, "--out", straight.to_str().unwrap()]);
    assert_exit(&o, 0);

    let split = dir.path().join("split");
    let o = tracc(&["train", "--config", &cfg, "--epochs", "1", "--out", split.to_str().unwrap()]);
    assert_exit(&o, 0);
    let o = tracc(&[
        "train",
        "--config",
        &cfg,
        "--epochs",
        "2",
        "--out",
        split.to_str().unwrap(),
        "--resume",
        split.join("last.ckpt").to_str().unwrap(),
    ]);
    assert_exit(&o, 0);

    let a = std::fs::read(straight.join("last.ckpt")).unwrap();
    let b = std::fs::read(split.join("last.ckpt")).unwrap();
    assert_eq!(a, b, "resumed training must land on the identical checkpoint");
}

#[test]
fn zero_learning_rate_leaves_weights_flat() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flat");
    let cfg = small_config(dir.path());
    let o = tracc(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "training.learning_rate=0.0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&o, 0);
    let a = std::fs::read(out.join("epoch_001.ckpt")).unwrap();
    let b = std::fs::read(out.join("epoch_002.ckpt")).unwrap();
    // Checkpoints differ only in the epoch counter byte region; weights and
    // momentum are identical, so strip the header difference by length check
    // plus a targeted comparison through the library.
    assert_eq!(a.len(), b.len());
    let mut cfg_text = std::fs::read_to_string(&cfg).unwrap();
    cfg_text = cfg_text.replace("learning_rate = 0.05", "learning_rate = 0.0");
    let parsed = tracc::model::parse_config(&cfg_text).unwrap();
    let mut s1 = tracc::golden::TrainState::new(&parsed).unwrap();
    let mut s2 = tracc::golden::TrainState::new(&parsed).unwrap();
    tracc::golden::read_checkpoint(&out.join("epoch_001.ckpt"), &mut s1, parsed.hw.pof).unwrap();
    tracc::golden::read_checkpoint(&out.join("epoch_002.ckpt"), &mut s2, parsed.hw.pof).unwrap();
    for (wa, wb) in s1.weights.iter().zip(&s2.weights) {
        if let (Some(x), Some(y)) = (wa, wb) {
            assert_eq!(x.raw(), y.raw(), "weights moved despite zero learning rate");
        }
    }
}

#[test]
fn verify_cross_checks_the_two_engines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = tracc(&[
        "verify",
        "--config",
        &cfg,
        "--batches",
        "2",
        "--out",
        dir.path().join("v").to_str().unwrap(),
    ]);
    assert_exit(&o, 0);
    let status = status_line(&o);
    assert!(status.contains("ok=true"), "{status}");
    assert!(status.contains("engines=bit-identical"), "{status}");
}

#[test]
fn verify_rejects_order_sensitive_rounding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = tracc(&[
        "verify",
        "--config",
        &cfg,
        "--set",
        "formats.rounding=stochastic",
        "--set",
        "formats.rounding_seed=7",
        "--out",
        dir.path().join("v").to_str().unwrap(),
    ]);
    assert_exit(&o, 2);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("deterministic rounding"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn report_summarizes_throughput() {
    let o = tracc(&["report", "--network", "cifar10_1x"]);
    assert_exit(&o, 0);
    let text = stdout(&o);
    assert!(text.contains("GOPS"), "{text}");
    assert!(text.contains("utilization"), "{text}");
    let status = status_line(&o);
    assert!(status.starts_with("tracc-status: command=report ok=true"), "{status}");
}

#[test]
fn simulate_writes_report_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let cfg = small_config(dir.path());
    let o = tracc(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_exit(&o, 0);
    for f in ["plan.toml", "schedule.csv", "report.toml", "latency.csv", "dram.csv", "buffers.csv"]
    {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    // CSVs are CRLF-terminated with a header row.
    let lat = std::fs::read_to_string(out.join("latency.csv")).unwrap();
    assert!(lat.contains("\r\n"));
}

#[test]
fn binary_dataset_files_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar");
    write_cifar_binary(&data, 77, 24, 8).unwrap();
    let cfg = small_config(dir.path());
    let o = tracc(&[
        "train",
        "--config",
        &cfg,
        "--dataset",
        &format!("cifar10:{}", data.display()),
        "--epochs",
        "1",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_exit(&o, 0);
    assert!(stdout(&o).contains("24 images"), "{}", stdout(&o));
}

#[test]
fn command_line_overrides_beat_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = small_config(dir.path());
    let o = tracc(&[
        "train",
        "--config",
        &cfg,
        "--epochs",
        "1",
        "--seed",
        "99",
        "--batch-size",
        "6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&o, 0);
    // 48 images at batch 6 -> 8 batches in the epoch row.
    let csv = std::fs::read_to_string(out.join("epochs.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    assert!(row.starts_with("1,8,48,"), "{row}");
}
