use std::path::Path;
use std::process::{Command, Output};

fn pfmech(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pfmech"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "pfmech {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn datagen_solve_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("test.jsonl");
    pfmech(&["datagen", "--dist", "truthful", "--agents", "2", "--resources", "2", "--count", "6", "--seed", "3", "--out", s(&data)]);
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 6);

    let out = pfmech(&["solve", "--mechanism", "pa", "--instance", s(&data)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["feasible"], true);
    assert_eq!(v["allocation"].as_array().unwrap().len(), 4);
    assert_eq!(v["ratios"].as_array().unwrap().len(), 2);

    let search = dir.path().join("search.json");
    std::fs::write(&search, r#"{"steps": 4, "restarts": 0}"#).unwrap();
    let report = dir.path().join("table.csv");
    let out = pfmech(&[
        "eval", "--mechanism", "pf", "--mechanism", "mixture", "--data", s(&data), "--report", s(&report), "--search", s(&search),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PF"));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("mechanism,metric,mean,std,normalized"));
    let json = report.with_extension("json");
    assert!(json.exists());

    let md = dir.path().join("report.md");
    pfmech(&["gen-report", "--inputs", s(&json), "--out", s(&md)]);
    assert!(std::fs::read_to_string(&md).unwrap().contains("table"));
}

#[test]
fn train_then_evaluate_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.jsonl");
    pfmech(&["datagen", "--dist", "cauchy", "--agents", "2", "--resources", "2", "--count", "8", "--out", s(&data)]);
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"iterations": 3, "batch_size": 4, "arch": {"hidden": 8, "depth": 1}, "inner": {"steps": 2, "restarts": 0}}"#,
    )
    .unwrap();
    let model = dir.path().join("model.json");
    pfmech(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&model)]);
    assert!(model.exists());
    let history = std::fs::read_to_string(dir.path().join("model.json.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(dir.path().join("model.json.state.json").exists());

    let search = dir.path().join("search.json");
    std::fs::write(&search, r#"{"steps": 2, "restarts": 0}"#).unwrap();
    let report = dir.path().join("eval.csv");
    pfmech(&["eval", "--model", s(&model), "--data", s(&data), "--report", s(&report), "--search", s(&search)]);
    assert!(std::fs::read_to_string(&report).unwrap().contains("RPF-Net"));
}

#[test]
fn sweep_and_heatmap_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep.csv");
    let out = pfmech(&["sweep-fig1", "--mechanism", "pf", "--out", s(&sweep)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("truthful"));
    assert!(std::fs::read_to_string(&sweep).unwrap().lines().count() > 200);

    let heat = dir.path().join("heat.csv");
    pfmech(&["heatmap", "--mechanism", "pf", "--mechanism", "pa", "--grid", "5", "--out", s(&heat)]);
    assert!(dir.path().join("heat-0.csv").exists());
    assert!(dir.path().join("heat-1.csv").exists());
}

#[test]
fn adversarial_datagen_keeps_the_base_set() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("adv.jsonl");
    let search = dir.path().join("search.json");
    std::fs::write(&search, r#"{"steps": 2, "restarts": 0}"#).unwrap();
    pfmech(&[
        "datagen", "--dist", "adversarial", "--agents", "2", "--resources", "2", "--count", "3", "--out", s(&data), "--search", s(&search),
    ]);
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 3);
    assert!(dir.path().join("adv.jsonl.base").exists());
}

#[test]
fn eval_without_a_mechanism_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    pfmech(&["datagen", "--dist", "truthful", "--agents", "2", "--resources", "2", "--count", "2", "--out", s(&data)]);
    let out = Command::new(env!("CARGO_BIN_EXE_pfmech"))
        .args(["eval", "--data", s(&data), "--report", s(&dir.path().join("r.csv"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
