//! End-to-end subcommand flows against the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn sicl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sicl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_overrides(dir: &Path, extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = vec![
        "--out".into(),
        dir.display().to_string(),
        "--set".into(),
        "world.num_subjects=4".into(),
        "--set".into(),
        "world.num_activities=2".into(),
        "--set".into(),
        "world.windows_per_pair=6".into(),
        "--set".into(),
        "pretrain_epochs=2".into(),
        "--set".into(),
        "linear_epochs=2".into(),
        "--set".into(),
        "batch_size=8".into(),
        "--set".into(),
        "split.train_subjects=[0,1,2]".into(),
        "--set".into(),
        "split.test_subjects=[3]".into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

#[test]
fn pipeline_gen_pretrain_eval_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let args = tiny_overrides(dir, &[]);
    let out = sicl(&[&["gen"][..], &args.iter().map(String::as_str).collect::<Vec<_>>()].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("dataset.sicl").exists());
    assert!(dir.join("manifest.json").exists());
    assert!(dir.join("config_echo.json").exists());

    let dataset = dir.join("dataset.sicl");
    let args = tiny_overrides(dir, &["--dataset", dataset.to_str().unwrap()]);
    let out = sicl(
        &[&["pretrain"][..], &args.iter().map(String::as_str).collect::<Vec<_>>()].concat(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoint = dir.join("checkpoint.sickpt");
    assert!(checkpoint.exists());
    let curve = std::fs::read_to_string(dir.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,mean_loss\n"));
    assert_eq!(curve.lines().count(), 3);

    let args = tiny_overrides(
        dir,
        &[
            "--dataset",
            dataset.to_str().unwrap(),
            "--checkpoint",
            checkpoint.to_str().unwrap(),
        ],
    );
    let out = sicl(
        &[&["linear-eval"][..], &args.iter().map(String::as_str).collect::<Vec<_>>()].concat(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let acc = report["mean_class_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // idempotent: the same inputs give the same numbers
    let first = report.clone();
    let out = sicl(
        &[&["linear-eval"][..], &tiny_overrides(
            dir,
            &[
                "--dataset",
                dataset.to_str().unwrap(),
                "--checkpoint",
                checkpoint.to_str().unwrap(),
            ],
        )
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()]
        .concat(),
    );
    assert!(out.status.success());
    let mut second: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    second["wall_time_secs"] = first["wall_time_secs"].clone();
    assert_eq!(first, second);

    let out = sicl(&[
        "analyze",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hist = std::fs::read_to_string(dir.join("histogram.csv")).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,count_all,count_intra\n"));
    assert_eq!(hist.lines().count(), 51);
    assert!(dir.join("sim_stats.json").exists());

    // finetune without a checkpoint starts from random weights
    let args = tiny_overrides(dir, &["--dataset", dataset.to_str().unwrap()]);
    let out = sicl(
        &[&["finetune"][..], &args.iter().map(String::as_str).collect::<Vec<_>>()].concat(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn matrix_emits_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = tiny_overrides(
        dir,
        &["--set", "matrix.seed_count=3", "--jobs", "2"],
    );
    let out = sicl(&[&["matrix"][..], &args.iter().map(String::as_str).collect::<Vec<_>>()].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "loss,seed,mean_class_accuracy,gap");
    assert_eq!(lines.len(), 7, "expected 6 cells:\n{csv}");
    assert_eq!(csv.matches("\nnce,").count(), 3);
    assert_eq!(csv.matches("\nsicl,").count(), 3);
}

#[test]
fn missing_checkpoint_is_a_readable_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = tiny_overrides(dir, &[]);
    let out = sicl(&[&["gen"][..], &args.iter().map(String::as_str).collect::<Vec<_>>()].concat());
    assert!(out.status.success());
    let args = tiny_overrides(
        dir,
        &[
            "--dataset",
            dir.join("dataset.sicl").to_str().unwrap(),
            "--checkpoint",
            dir.join("never_written.sickpt").to_str().unwrap(),
        ],
    );
    let out = sicl(
        &[&["linear-eval"][..], &args.iter().map(String::as_str).collect::<Vec<_>>()].concat(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("never_written.sickpt"),
        "error should name the path: {stderr}"
    );
}

#[test]
fn config_echo_reproduces_the_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = tiny_overrides(dir, &["--set", "world.rng_seed=77"]);
    let out = sicl(&[&["gen"][..], &args.iter().map(String::as_str).collect::<Vec<_>>()].concat());
    assert!(out.status.success());
    let first = std::fs::read(dir.join("dataset.sicl")).unwrap();

    let rerun = tempfile::tempdir().unwrap();
    let out = sicl(&[
        "gen",
        "--config",
        dir.join("config_echo.json").to_str().unwrap(),
        "--out",
        rerun.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let second = std::fs::read(rerun.path().join("dataset.sicl")).unwrap();
    assert_eq!(first, second, "echoed config must reproduce outputs exactly");
}
