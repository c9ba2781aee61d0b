use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{"epochs": 2, "channels": 8, "checkpoint_every": 1,
    "data": {"synthetic": {"train": 32, "val": 16}}}"#;

fn mld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mld"))
        .args(args)
        .env("MLD_THREADS", "2")
        .output()
        .expect("spawn mld")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn train_eval_report_round_trip() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMALL);
    let run = tmp.path().join("run");
    let o = mld(&["train", "--config", &cfg, "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "metrics.csv", "metrics.json", "best.ckpt", "log.txt", "checkpoints/epoch_1.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ckpt = run.join("best.ckpt");
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    assert_eq!(code(&mld(&["eval", "--checkpoint", s(&ckpt), "--split", "val", "--out", s(&a)])), 0);
    assert_eq!(code(&mld(&["eval", "--checkpoint", s(&ckpt), "--split", "val", "--out", s(&b)])), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    assert!(report["mAP"].as_f64().is_some());

    let csv = tmp.path().join("r.csv");
    assert_eq!(code(&mld(&["report", "--run", s(&run), "--format", "csv", "--out", s(&csv)])), 0);
    assert_eq!(fs::read(&csv).unwrap(), fs::read(run.join("metrics.csv")).unwrap());

    let json = tmp.path().join("r.json");
    assert_eq!(code(&mld(&["report", "--run", s(&run), "--format", "json", "--out", s(&json)])), 0);
    let parse = |p: &Path| serde_json::from_slice::<serde_json::Value>(&fs::read(p).unwrap()).unwrap();
    assert_eq!(parse(&json), parse(&run.join("metrics.json")));

    let plots = tmp.path().join("plots");
    let o = mld(&["report", "--run", s(&run), "--format", "plot", "--out", s(&plots)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("legend"));
    for f in ["losses.png", "metrics.png", "ratio.png"] {
        assert!(plots.join(f).exists(), "missing {f}");
    }
}

#[test]
fn resume_matches_straight_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMALL);
    let straight = tmp.path().join("straight");
    let resumed = tmp.path().join("resumed");
    assert_eq!(code(&mld(&["train", "--config", &cfg, "--out", s(&straight)])), 0);
    let ckpt = straight.join("checkpoints/epoch_1.ckpt");
    assert_eq!(code(&mld(&["train", "--config", &cfg, "--out", s(&resumed), "--resume", s(&ckpt)])), 0);
    assert_eq!(
        fs::read(straight.join("metrics.csv")).unwrap(),
        fs::read(resumed.join("metrics.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"batch_size": 0}"#);
    let o = mld(&["--json", "train", "--config", &cfg, "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 1);
    let line: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "config");
    assert!(line["message"].as_str().unwrap().contains("batch_size"));
}

#[test]
fn divergence_exits_two_with_breakdown() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "div.json",
        r#"{"epochs": 2, "channels": 8, "base_lr": 1e6, "data": {"synthetic": {"train": 48, "val": 24}}}"#,
    );
    let o = mld(&["--json", "train", "--config", &cfg, "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
    let line: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "divergence");
    assert!(line["breakdown"].is_object());
}

#[test]
fn gradcheck_reports_every_component() {
    let o = mld(&["gradcheck", "--trials", "10"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    for c in ["parser", "mc_loss", "bce", "model", "redrawn"] {
        assert!(out.contains(c), "{out}");
    }
    assert_eq!(code(&mld(&["gradcheck", "--trials", "10", "--tolerance", "1e-30"])), 3);
}

#[test]
fn report_lists_missing_artifacts() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("config.json"), "{}").unwrap();
    let o = mld(&["report", "--run", s(tmp.path())]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("metrics.csv") && !err.contains("config.json"), "{err}");
}

#[test]
fn gen_data_and_eval_on_manifest() {
    let tmp = TempDir::new().unwrap();
    let params = write_config(tmp.path(), "p.json", r#"{"train": 12, "val": 6, "test": 4}"#);
    let out = tmp.path().join("data");
    assert_eq!(code(&mld(&["gen-data", "--params", &params, "--out", s(&out), "--seed", "5"])), 0);
    for split in ["train", "val", "test"] {
        assert!(out.join(split).is_dir(), "missing {split}");
    }

    let cfg = write_config(tmp.path(), "cfg.json", SMALL);
    let run = tmp.path().join("run");
    assert_eq!(code(&mld(&["train", "--config", &cfg, "--out", s(&run)])), 0);
    let report = tmp.path().join("eval.json");
    let o = mld(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--data",
        s(&out.join("test")),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mAP"));

    let bad = write_config(tmp.path(), "bad.json", r#"{"classes": 0}"#);
    assert_eq!(code(&mld(&["gen-data", "--params", &bad, "--out", s(&tmp.path().join("x"))])), 1);
}

#[test]
fn sweep_writes_table_and_plot() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMALL);
    let out = tmp.path().join("sweep");
    let o = mld(&["sweep-beta", "--config", &cfg, "--values", "0,1", "--out", s(&out), "--parallel"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "beta,mAP,CF1,OF1,status");
    assert_eq!(lines.len(), 3);
    assert!(out.join("sweep.png").exists() && out.join("beta_0").is_dir() && out.join("beta_1").is_dir());
}

#[test]
fn invalid_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_mld"))
        .args(["gradcheck", "--trials", "1"])
        .env("MLD_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}
