use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pseudoheal::experiment::SummaryRow;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pseudoheal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny experiment: 40 slices, two generator updates, small evaluation networks.
const TINY: &str = r#"{
  "phantom": { "count": 40, "deformed_healthy": 12 },
  "train": { "epochs": 1, "max_steps": 2, "warm_epochs": 0, "critic_iters": 1,
             "net": { "base_channels": 4, "critic_channels": 4, "levels": 2 } },
  "eval": { "judge": { "epochs": 25, "fine_tune_epochs": 1, "lr": 3e-3, "net": { "base_channels": 4, "critic_channels": 4, "levels": 2 } },
            "dec": { "epochs": 1, "fine_tune_epochs": 1, "net": { "base_channels": 4, "critic_channels": 4, "levels": 2 } } }
}"#;

#[test]
fn pipeline_from_phantom_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let data = d.join("data");
    ok(&["phantom", "--config", s(&cfg), "--out", s(&data)]);
    assert!(data.join("manifest.json").exists());

    let prepared = d.join("prepared");
    let hist = ok(&["prepare", "--config", s(&cfg), "--data", s(&data), "--out", s(&prepared)]);
    assert!(hist.starts_with("split,healthy,pathological,js_divergence"));

    let (a, b) = (d.join("run_a"), d.join("run_b"));
    let out_a = ok(&["train", "--config", s(&cfg), "--data", s(&prepared), "--out", s(&a), "--quiet"]);
    let out_b = ok(&["train", "--config", s(&cfg), "--data", s(&prepared), "--out", s(&b), "--quiet"]);
    let hash = |o: &str| o.split("sha256 ").nth(1).unwrap().trim_end_matches(|c| c == ')' || c == '\n').to_string();
    assert_eq!(hash(&out_a), hash(&out_b));
    for f in ["config.json", "losses.csv", "model.ckpt"] {
        assert!(a.join(f).exists(), "{f}");
    }
    // A finished run is reused, not retrained.
    let again = ok(&["train", "--config", s(&cfg), "--data", s(&prepared), "--out", s(&a), "--quiet"]);
    assert!(again.starts_with("reused"));

    let report = d.join("report.csv");
    ok(&[
        "eval", "--config", s(&cfg), "--bundle", s(&a), "--data", s(&prepared), "--report", s(&report),
    ]);
    let summary = d.join("summary.csv");
    ok(&["report", "--input", s(&report), "--out", s(&summary)]);
    let rows: Vec<SummaryRow> = csv::Reader::from_path(&summary)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].method, "run_a");

    let panels = d.join("panels");
    let blinding = d.join("private").join("blinding_map.csv");
    ok(&[
        "panels", "--data", s(&prepared), "--run", &format!("x={}", s(&a)), "--run", &format!("y={}", s(&b)),
        "--out", s(&panels), "--blinding", s(&blinding), "--count", "2",
    ]);
    assert!(panels.join("panel_0000.png").exists());
    assert!(!panels.join("blinding_map.csv").exists());

    let scores = d.join("scores.csv");
    let mut sheet = String::from("rater_id,panel_id,position,criterion,score\n");
    for rater in ["r1", "r2"] {
        for panel in 0..2 {
            for pos in 0..2 {
                sheet.push_str(&format!("{rater},{panel},{pos},identity,{}\n", (panel + pos) % 2));
            }
        }
    }
    fs::write(&scores, sheet).unwrap();
    let stats = ok(&[
        "scores", "--scores", s(&scores), "--blinding", s(&blinding), "--out", s(&d.join("study.csv")),
    ]);
    assert!(stats.contains("identity"));
}

#[test]
fn config_errors_exit_with_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 1, "learning_rate": 0.1}}"#).unwrap();
    let out = run(&["phantom", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train"), "{err}");
}

#[test]
fn missing_data_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train", "--data", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("run")), "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergent_training_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cfg.json");
    let blown = TINY.replace(r#""warm_epochs": 0"#, r#""warm_epochs": 0, "max_steps": 6, "optimizer": { "lr": 1e300 }"#)
        .replace(r#""max_steps": 2, "#, "");
    fs::write(&cfg, blown).unwrap();
    let data = d.join("data");
    ok(&["phantom", "--config", s(&cfg), "--out", s(&data)]);
    let out = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&d.join("run")), "--quiet"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
