use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const CONFIG: &str = r#"{
  "synthetic": {"n_sequences": 40, "sequence_length": 16},
  "pipeline": {
    "predictor": {"max_epochs": 30},
    "denoiser": {"hidden": [32], "train_steps": 300, "batch_size": 16},
    "diffusion_steps": 50,
    "samples": 2,
    "max_eval_windows": 30,
    "certify": {"theorem2_points": 30, "equality_points": 12, "equality_queries": 30}
  }
}"#;

fn pgdm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgdm"))
        .current_dir(dir)
        .args(["--config", "cfg.json", "--workdir", "run"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = pgdm(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn failure(dir: &Path, args: &[&str]) -> Value {
    let out = pgdm(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    serde_json::from_slice(&out.stderr).expect("error is JSON")
}

fn new_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

/// A fully trained run shared by the tests that only read from it.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = new_dir();
        for cmd in ["generate", "fit-patterns", "train-guidance", "train-diffusion"] {
            ok(dir.path(), &[cmd]);
        }
        dir
    })
    .path()
}

#[test]
fn certify_reports_no_violations() {
    let s = ok(trained(), &["certify"]);
    assert_eq!(s["theorem1_violations"], 0);
    assert!(s["theorem1_checked"].as_u64().unwrap() > 0);
    assert_eq!(s["theorem2_violations"], 0);
    assert!(s["p_equals_n_max_residual"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn unguided_forecast_is_byte_identical() {
    let dir = trained();
    let read = |name: &str| std::fs::read(dir.join(name)).unwrap();
    for (name, extra) in [("a.json", &[][..]), ("b.json", &[][..]), ("c.json", &["--sequential"][..])] {
        let mut args = vec!["forecast", "--w-bar", "0", "--w-star-bar", "0", "--output", name];
        args.extend_from_slice(extra);
        ok(dir, &args);
    }
    assert_eq!(read("a.json"), read("b.json"));
    assert_eq!(read("a.json"), read("c.json"));
    let f: Value = serde_json::from_slice(&read("a.json")).unwrap();
    let sample = &f["windows"][0]["samples"][0];
    assert_eq!(sample["w_used"], 0.0);
    assert_eq!(sample["w_star_used"], 0.0);
    assert!(sample["u"].as_f64().unwrap() >= 0.0);
}

#[test]
fn csv_forecast_has_one_row_per_step() {
    let dir = trained();
    ok(dir, &["forecast", "--format", "csv", "--output", "f.csv"]);
    let text = std::fs::read_to_string(dir.join("f.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("source,offset,sample,step,u,w_used,w_star_used,x0"));
    // 30 windows, 2 samples, 5 horizon steps
    assert_eq!(lines.count(), 30 * 2 * 5);
}

#[test]
fn evaluate_has_a_row_per_sweep_scale() {
    let s = ok(trained(), &["evaluate"]);
    let scales: Vec<f64> = s["rows"].as_array().unwrap().iter().map(|r| r["w_bar"].as_f64().unwrap()).collect();
    assert_eq!(scales, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    assert!(s["unguided_mae"].as_f64().unwrap().is_finite());
}

#[test]
fn stages_refuse_missing_and_stale_inputs() {
    let dir = new_dir();
    let e = failure(dir.path(), &["fit-patterns"]);
    assert_eq!(e["error"], "MissingArtifact");
    ok(dir.path(), &["generate"]);
    let e = failure(dir.path(), &["train-guidance"]);
    assert_eq!(e["error"], "MissingArtifact");
    assert!(e["path"].as_str().unwrap().ends_with("archetypes.json"));
    ok(dir.path(), &["fit-patterns", "--archetypes", "3"]);
    let e = failure(dir.path(), &["train-guidance"]);
    assert_eq!(e["error"], "StaleArtifact");
    let e = failure(dir.path(), &["--seed", "11", "fit-patterns"]);
    assert_eq!(e["error"], "StaleArtifact");
    assert!(e["path"].as_str().unwrap().ends_with("manifest.json"));
}

#[test]
fn edited_data_is_detected() {
    let dir = new_dir();
    ok(dir.path(), &["generate"]);
    let file = dir.path().join("run/data/seq_0000.csv");
    let mut text = std::fs::read_to_string(&file).unwrap();
    text.push_str(&text.lines().next().unwrap().to_string());
    std::fs::write(&file, text).unwrap();
    assert_eq!(failure(dir.path(), &["fit-patterns"])["error"], "StaleArtifact");
}

#[test]
fn invalid_config_is_reported() {
    let dir = new_dir();
    let e = failure(dir.path(), &["--gamma", "0", "generate"]);
    assert_eq!(e["error"], "InvalidConfig");
}

#[test]
fn ingest_copies_csv_sequences() {
    let dir = new_dir();
    let src: PathBuf = dir.path().join("raw");
    std::fs::create_dir(&src).unwrap();
    for i in 0..6 {
        let mut text = String::from("a,b\n");
        for t in 0..12 {
            text.push_str(&format!("{},{}\n", (t + i) as f64 * 0.1, (t % 2) as f64));
        }
        std::fs::write(src.join(format!("s{i}.csv")), text).unwrap();
    }
    let s = ok(dir.path(), &["ingest", "--input", "raw"]);
    assert_eq!(s["sequences"], 6);
    assert_eq!(s["d"], 2);
    let m: Value = serde_json::from_slice(&std::fs::read(dir.path().join("run/data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["source"], "ingest");
    assert_eq!(m["sequences"][0]["name"], "0000_s0");
    let sizes: usize = ["train", "val", "test"].iter().map(|k| m["split"][k].as_array().unwrap().len()).sum();
    assert_eq!(sizes, 6);
}
