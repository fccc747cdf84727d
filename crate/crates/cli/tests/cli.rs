use std::path::Path;
use std::process::{Command, Output};

use dtloss_core::noise::TransitionMatrix;
use dtloss_core::trainer::{load_checkpoint, LogRecord, LossType};

fn dtloss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtloss"))
        .args(args)
        .env_remove("DTLOSS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dtloss(args);
    assert!(
        out.status.success(),
        "dtloss {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen(dir: &Path, classes: usize, extra: &[&str]) {
    let k = classes.to_string();
    let mut args = vec![
        "gen", "--classes", &k, "--train", "300", "--test", "120", "--noise-keep", "0.7", "--seed", "5", "--out",
    ];
    let d = dir.to_str().unwrap();
    args.push(d);
    args.extend_from_slice(extra);
    ok(&args);
}

const SMALL: [&str; 8] = ["--main-epochs", "3", "--j-steps", "4", "--t-update-every", "64", "--pretrain-epochs", "1"];

fn train(data: &Path, out: &Path, mode: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--mode",
        mode,
    ];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    dtloss(&args)
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_writes_four_files_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 5, &[]);
    gen(&b, 5, &[]);
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["manifest.json", "noise_transition.csv", "test.jsonl", "train.jsonl"]);
    for name in ["noise_transition.csv", "test.jsonl", "train.jsonl"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name}");
    }
}

#[test]
fn gen_rejects_out_of_range_keep_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dtloss(&["gen", "--noise-keep", "1.5", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--noise-keep"));
}

#[test]
fn out_dir_defaults_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_dtloss"))
        .args(["gen", "--classes", "3", "--train", "20", "--test", "5"])
        .env("DTLOSS_OUT_DIR", tmp.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("train.jsonl").is_file());
}

#[test]
fn train_without_data_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train(&tmp.path().join("missing"), &tmp.path().join("m"), "both", &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn plain_xe_checkpoint_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    gen(&data, 3, &[]);
    assert!(train(&data, &model, "plain-xe", &[]).status.success());
    let ckpt = load_checkpoint(&model.join("checkpoint.json"), Some(3)).unwrap();
    assert_eq!(ckpt.config.mode.as_str(), "plain-xe");
    assert!(model.join("manifest.json").is_file());
}

fn log_records(path: &Path) -> Vec<LogRecord> {
    String::from_utf8(read(path))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn both_mode_logs_non_decreasing_q() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    gen(&data, 4, &[]);
    assert!(train(&data, &model, "both", &["--em-iterations", "3"]).status.success());
    let em: Vec<LogRecord> = log_records(&model.join("train_log.jsonl"))
        .into_iter()
        .filter(|r| r.loss_type == LossType::Em)
        .collect();
    assert!(!em.is_empty());
    for r in &em {
        assert!(r.q_after.unwrap() >= r.q_before.unwrap() - 1e-10, "{r:?}");
    }
}

#[test]
fn resume_continues_the_same_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, full, split) = (tmp.path().join("d"), tmp.path().join("full"), tmp.path().join("split"));
    gen(&data, 3, &[]);
    assert!(train(&data, &full, "both", &[]).status.success());
    assert!(train(&data, &split, "both", &["--halt-after-steps", "17"]).status.success());
    let resumed = dtloss(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        split.to_str().unwrap(),
        "--resume",
    ]);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    assert_eq!(read(&full.join("checkpoint.json")), read(&split.join("checkpoint.json")));
    assert_eq!(read(&full.join("train_log.jsonl")), read(&split.join("train_log.jsonl")));
}

#[test]
fn resume_refuses_new_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    gen(&data, 3, &[]);
    assert!(train(&data, &model, "both", &["--halt-after-steps", "3"]).status.success());
    let out = train(&data, &model, "both", &["--resume"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    gen(&data, 3, &[]);
    let cfg = tmp.path().join("train.toml");
    std::fs::write(&cfg, "mode = \"implicit-only\"\nmain_epochs = 1\npretrain_epochs = 1\nseed = 4\n").unwrap();
    let out = dtloss(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(out.status.success());
    let ckpt = load_checkpoint(&model.join("checkpoint.json"), None).unwrap();
    assert_eq!(ckpt.config.mode.as_str(), "implicit-only");
    assert_eq!((ckpt.config.seed, ckpt.config.main_epochs), (9, 1));

    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = dtloss(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_finite_training_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    gen(&data, 3, &[]);
    let out = train(&data, &model, "both", &["--learning-rate", "1e306"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step"));
}

#[test]
fn eval_is_reproducible_and_scores_recovery() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    gen(&data, 4, &[]);
    assert!(train(&data, &model, "both", &[]).status.success());
    let test = data.join("test.jsonl");
    let reports: Vec<(Vec<u8>, Vec<u8>)> = ["r1", "r2"]
        .iter()
        .map(|name| {
            let report = tmp.path().join(name).join("report.json");
            ok(&[
                "eval",
                "--model",
                model.to_str().unwrap(),
                "--data",
                test.to_str().unwrap(),
                "--report",
                report.to_str().unwrap(),
            ]);
            (read(&report), read(&report.with_extension("pr.tsv")))
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    let value: serde_json::Value = serde_json::from_slice(&reports[0].0).unwrap();
    assert!(value["transition_error"]["max_abs"].is_f64());
    assert!(value["transition_error"]["mean_abs"].is_f64());
    assert!(String::from_utf8_lossy(&reports[0].1).starts_with("rank\tscore\tprecision\trecall"));
}

#[test]
fn perfect_model_has_unit_ap() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    ok(&[
        "gen", "--classes", "3", "--train", "600", "--test", "200", "--noise-keep", "1", "--signal-strength", "1",
        "--seed", "3", "--out", data.to_str().unwrap(),
    ]);
    let out = dtloss(&[
        "train", "--data", data.to_str().unwrap(), "--out", model.to_str().unwrap(), "--mode", "plain-xe",
        "--main-epochs", "4",
    ]);
    assert!(out.status.success());
    let report = tmp.path().join("report.json");
    ok(&[
        "eval", "--model", model.to_str().unwrap(), "--data", data.join("test.jsonl").to_str().unwrap(), "--report",
        report.to_str().unwrap(),
    ]);
    let value: serde_json::Value = serde_json::from_slice(&read(&report)).unwrap();
    assert_eq!(value["average_precision"].as_f64(), Some(1.0));
}

#[test]
fn eval_rejects_class_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let (d3, d4, model) = (tmp.path().join("d3"), tmp.path().join("d4"), tmp.path().join("m"));
    gen(&d3, 3, &[]);
    gen(&d4, 4, &[]);
    assert!(train(&d3, &model, "plain-xe", &[]).status.success());
    let out = dtloss(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        d4.join("test.jsonl").to_str().unwrap(),
        "--report",
        tmp.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn export_of_initial_transition() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, model) = (tmp.path().join("d"), tmp.path().join("m"));
    gen(&data, 3, &[]);
    ok(&[
        "train", "--data", data.to_str().unwrap(), "--out", model.to_str().unwrap(), "--pretrain-epochs", "1",
        "--main-epochs", "0",
    ]);
    let csv = tmp.path().join("t.csv");
    ok(&["export-transition", "--model", model.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    let t = TransitionMatrix::read_csv(&csv).unwrap();
    let stored = load_checkpoint(&model.join("checkpoint.json"), None).unwrap().params.transition;
    for i in 0..3 {
        assert!((t.column_sum(i) - 1.0).abs() < 1e-9);
        for k in 0..3 {
            let expected = if i == k { 0.0 } else { 0.5 };
            assert_eq!(t.get(i, k), expected);
            assert!((t.get(i, k) - stored.get(i, k)).abs() < 1e-12);
        }
    }
}

#[test]
fn export_without_checkpoint_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dtloss(&[
        "export-transition",
        "--model",
        tmp.path().join("nothing").to_str().unwrap(),
        "--out",
        tmp.path().join("t.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
