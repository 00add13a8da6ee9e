use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clce_core::model::{encode_checkpoint, Dense, EncoderModel};
use rand::Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

fn clce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clce")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

const SMALL: &str = r#"{
  "dataset": {"kind": "blobs", "classes": 8, "per_class": 40, "dim": 6, "spread": 0.1},
  "split": {"kind": "per_sample", "train_fraction": 0.5},
  "model": {"hidden": [16], "embed_dim": 8},
  "train": {"batch_size": 16, "epochs": 4},
  "fewshot": {"episodes": 50}
}"#;

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn train(dir: &Path, config: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(out);
    let mut args = vec!["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(extra);
    let o = clce(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn train_writes_history_with_contrastive_column_at_lambda_zero() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &SMALL.replace(r#""fewshot""#, r#""loss": {"lambda": 0.0}, "fewshot""#),
    );
    let out = train(dir.path(), &cfg, "a", &[]);
    let (header, rows) = read_csv(&out.join("history.csv"));
    assert_eq!(header, ["step", "epoch", "ce", "lacln", "clce"]);
    assert_eq!(rows.len(), 4 * 10);
    for row in &rows {
        let ce: f64 = row[2].parse().unwrap();
        let lacln: f64 = row[3].parse().unwrap();
        let clce: f64 = row[4].parse().unwrap();
        assert!(lacln > 0.0);
        assert_eq!(ce, clce);
    }
    let text = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(!text.contains('\r'));
    assert!(text.lines().skip(1).all(|l| !l.contains('e')));
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let missing = write_config(
        dir.path(),
        "m.json",
        r#"{"dataset": {"kind": "csv", "path": "nowhere.csv"}}"#,
    );
    let o = clce(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("does not exist"));

    let typo = write_config(dir.path(), "t.json", r#"{"loss": {"lamda": 0.5}}"#);
    assert_eq!(code(&clce(&["train", "--config", typo.to_str().unwrap()])), 2);

    let lambdas = write_config(dir.path(), "l.json", r#"{"sweep": {"lambdas": [1.5]}}"#);
    assert_eq!(code(&clce(&["sweep", "--config", lambdas.to_str().unwrap()])), 2);

    assert_eq!(code(&clce(&["gradcheck", "--h", "0"])), 2);
    assert_eq!(code(&clce(&["eval-fewshot", "--checkpoint", "/nonexistent.clce"])), 2);
    assert_eq!(code(&clce(&["frobnicate"])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "d.json",
        &SMALL.replace(
            r#""epochs": 4"#,
            r#""epochs": 4, "optimizer": {"kind": "sgd_momentum", "learning_rate": 1e300, "momentum": 0.9}"#,
        ),
    );
    let o = clce(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("g");
    let o = clce(&["gradcheck", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = read_csv(&out.join("gradcheck.csv"));
    assert_eq!(rows.len(), 144);
    assert!(rows.iter().all(|r| r[9] == "true"));

    let o = clce(&["gradcheck", "--corrupt-gradient", "--batch-sizes", "2"]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("FAIL case"));
}

#[test]
fn eval_reports_and_flags_single_episode() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let out = train(dir.path(), &cfg, "t", &[]);
    let ckpt = out.join("checkpoint.clce");
    let eval = dir.path().join("e");
    let o = clce(&[
        "eval-fewshot",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
        "--per-episode",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("fewshot_report.json")).unwrap()).unwrap();
    assert!(report["mean"].as_f64().unwrap() > 0.9, "{report}");
    assert!(report["median"].is_number() && report["ci95"].is_number());
    assert_eq!(report["single_episode"], false);
    let (_, rows) = read_csv(&eval.join("episodes.csv"));
    assert_eq!(rows.len(), 50);

    let single = dir.path().join("s");
    let o = clce(&[
        "eval-fewshot",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        single.to_str().unwrap(),
        "--episodes",
        "1",
    ]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(single.join("fewshot_report.json")).unwrap()).unwrap();
    assert_eq!(report["single_episode"], true);
    assert_eq!(report["ci95"], 0.0);

    let o = clce(&[
        "eval-fewshot",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        single.to_str().unwrap(),
        "--shot",
        "12",
    ]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("class 0"), "{}", stderr(&o));
}

#[test]
fn untrained_encoder_is_at_chance() {
    let dir = TempDir::new().unwrap();
    let dims = clce_core::model::ModelDims {
        input_dim: 8,
        hidden: vec![16],
        embed_dim: 8,
        num_classes: 10,
    };
    let random = EncoderModel::new(&dims, 99).unwrap();
    let ckpt = dir.path().join("r.clce");
    fs::write(&ckpt, encode_checkpoint(&random)).unwrap();
    let csv_path = dir.path().join("noise.csv");
    let mut text = String::from("a,b,c,d,e,f,g,h,label\n");
    let mut rng = clce_core::rng::rng_for(12345, &[]);
    for i in 0..300 {
        for _ in 0..8 {
            text.push_str(&format!("{},", rng.sample::<f64, _>(StandardNormal)));
        }
        text.push_str(&format!("c{}\n", i % 10));
    }
    fs::write(&csv_path, text).unwrap();
    let cfg = write_config(
        dir.path(),
        "n.json",
        r#"{"dataset": {"kind": "csv", "path": "noise.csv"}, "split": {"kind": "none"}}"#,
    );
    let out = dir.path().join("e");
    let o = clce(&[
        "eval-fewshot",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("fewshot_report.json")).unwrap()).unwrap();
    let mean = report["mean"].as_f64().unwrap();
    assert!((mean - 0.2).abs() < 0.05, "{mean}");
}

#[test]
fn diagnose_outputs_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let ckpt = train(dir.path(), &cfg, "t", &[]).join("checkpoint.clce");
    let out = dir.path().join("d");
    let o = clce(&[
        "diagnose",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--target-class",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("histogram.csv"));
    assert_eq!(header, ["bin_left", "bin_right", "pos_count", "neg_count"]);
    assert_eq!(rows.len(), 40);
    let pos: u64 = rows.iter().map(|r| r[2].parse::<u64>().unwrap()).sum();
    let neg: u64 = rows.iter().map(|r| r[3].parse::<u64>().unwrap()).sum();
    // Class 3 keeps 20 of its 40 samples in the evaluation half.
    assert_eq!(pos, 20 * 19 / 2);
    assert_eq!(neg, 20 * 140);
    assert_eq!(rows[0][0].parse::<f64>().unwrap(), -1.0);
    assert_eq!(rows[39][1].parse::<f64>().unwrap(), 1.0);
    let iso: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("isotropy.json")).unwrap()).unwrap();
    let score = iso["score"].as_f64().unwrap();
    assert!(score > 0.0 && score <= 1.0);
    let (header, rows) = read_csv(&out.join("projection.csv"));
    assert_eq!(header, ["index", "label", "x", "y"]);
    assert_eq!(rows.len(), 160);
}

#[test]
fn diagnose_degenerate_checkpoint_and_small_class() {
    let dir = TempDir::new().unwrap();
    let mut layer = Dense::zeros(6, 4);
    layer.bias = ndarray::array![0.5, -1.0, 2.0, 0.25];
    let model = EncoderModel::from_layers(vec![layer], Dense::zeros(4, 8)).unwrap();
    let ckpt = dir.path().join("flat.clce");
    fs::write(&ckpt, encode_checkpoint(&model)).unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let out = dir.path().join("d");
    let o = clce(&[
        "diagnose",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let iso: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("isotropy.json")).unwrap()).unwrap();
    assert!((iso["score"].as_f64().unwrap() - (-2.0f64).exp()).abs() < 1e-6);

    let csv_path = dir.path().join("tiny.csv");
    let mut text = String::from("a,b,c,d,e,f,label\n");
    for i in 0..9 {
        let label = if i == 8 { "lonely" } else if i % 2 == 0 { "x" } else { "y" };
        text.push_str(&format!("{i},1,{},0,1,2,{label}\n", i * i));
    }
    fs::write(&csv_path, text).unwrap();
    let tiny = write_config(
        dir.path(),
        "tiny.json",
        r#"{"dataset": {"kind": "csv", "path": "tiny.csv"}, "split": {"kind": "none"}, "diagnose": {"target_class": 2}}"#,
    );
    let o = clce(&[
        "diagnose",
        "--config",
        tiny.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn sweep_counts_rows_and_matches_ce_arm() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        &SMALL.replace(
            r#""fewshot""#,
            r#""sweep": {"arms": ["ce", "ce_cl_hnm"], "lambdas": [0.0, 1.0]}, "seeds": [7], "fewshot""#,
        ),
    );
    let out = dir.path().join("s");
    let o = clce(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 4);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert!(rows.iter().all(|r| r[col("status")] == "ok"));
    let ce_zero = &rows[0];
    let hnm_zero = &rows[2];
    assert_eq!(ce_zero[col("arm")], "ce");
    assert_eq!(hnm_zero[col("arm")], "ce_cl_hnm");
    assert_eq!(hnm_zero[col("lambda")].parse::<f64>().unwrap(), 0.0);
    assert_eq!(ce_zero[col("mean_accuracy")], hnm_zero[col("mean_accuracy")]);
    assert_eq!(rows[1][col("effective_lambda")].parse::<f64>().unwrap(), 0.0);
    assert_eq!(ce_zero[col("mean_accuracy")], rows[1][col("mean_accuracy")]);
}

#[test]
fn sweep_records_failed_cells_and_continues() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("s");
    let diverge = write_config(
        dir.path(),
        "d.json",
        &SMALL.replace(
            r#""epochs": 4"#,
            r#""epochs": 2, "optimizer": {"kind": "sgd_momentum", "learning_rate": 1e300, "momentum": 0.0}"#,
        )
        .replace(r#""fewshot""#, r#""sweep": {"arms": ["ce", "ce_cl_hnm"], "lambdas": [0.5]}, "seeds": [1], "fewshot""#),
    );
    let o = clce(&["sweep", "--config", diverge.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("sweep.csv"));
    let status = header.iter().position(|h| h == "status").unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[status] == "diverged"), "{rows:?}");
    assert!(rows.iter().all(|r| r[status + 1].contains("diverged")));
}

#[test]
fn outputs_are_deterministic_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &SMALL.replace(r#""fewshot""#, r#""sweep": {"arms": ["ce", "ce_cl_hnm"], "lambdas": [0.5]}, "seeds": [3, 4], "fewshot""#),
    );
    let c = cfg.to_str().unwrap();
    let run = |cmd: &[&str], out: &str, threads: &str| {
        let out = dir.path().join(out);
        let mut args = cmd.to_vec();
        args.extend(["--config", c, "--out", out.to_str().unwrap(), "--threads", threads]);
        let o = clce(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let a = run(&["train"], "a", "0");
    let b = run(&["train"], "b", "0");
    let t = run(&["train"], "t", "4");
    for f in ["history.csv", "checkpoint.clce"] {
        let reference = fs::read(a.join(f)).unwrap();
        assert_eq!(reference, fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(reference, fs::read(t.join(f)).unwrap(), "{f}");
    }
    let ckpt = a.join("checkpoint.clce");
    let ck = ckpt.to_str().unwrap();
    let e0 = run(&["eval-fewshot", "--checkpoint", ck, "--per-episode"], "e0", "0");
    let e4 = run(&["eval-fewshot", "--checkpoint", ck, "--per-episode"], "e4", "4");
    for f in ["fewshot_report.json", "episodes.csv"] {
        assert_eq!(fs::read(e0.join(f)).unwrap(), fs::read(e4.join(f)).unwrap(), "{f}");
    }
    let s0 = run(&["sweep"], "s0", "0");
    let s4 = run(&["sweep"], "s4", "4");
    assert_eq!(fs::read(s0.join("sweep.csv")).unwrap(), fs::read(s4.join("sweep.csv")).unwrap());
    let d0 = run(&["diagnose", "--checkpoint", ck], "d0", "0");
    let d1 = run(&["diagnose", "--checkpoint", ck], "d1", "0");
    for f in ["histogram.csv", "isotropy.json", "projection.csv"] {
        assert_eq!(fs::read(d0.join(f)).unwrap(), fs::read(d1.join(f)).unwrap(), "{f}");
    }
}
