use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mvt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvt")).args(args).output().unwrap()
}

fn golden_spec() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/sim.json")
}

fn small_world(dir: &Path) {
    let spec = serde_json::json!({
        "num_classes": 4,
        "n_items": 200,
        "seed": 3,
        "classifier": {"noise": {"kind": "symmetric", "diagonal": 0.7}, "feature_dim": 4},
        "scorer": {"fidelity": 1.0, "logit_noise_sigma": 0.0, "seed": 1}
    });
    let path = dir.join("spec.json");
    std::fs::write(&path, spec.to_string()).unwrap();
    let out = mvt(&["simulate", "--spec", path.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn step(dir: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--data", dir.to_str().unwrap(), "--seed", "7"];
    all.extend_from_slice(args);
    mvt(&all)
}

fn jsonl_len(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn chain_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_world(dir);
    for args in [
        &["sample-support", "--sampler", "stratified"][..],
        &["estimate-t"],
        &["therapy"],
        &["evaluate"],
        &["export-ft"],
        &["ood-detect", "--plot"],
    ] {
        let out = step(dir, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(jsonl_len(&dir.join("manifest.jsonl")), 201);
    assert_eq!(jsonl_len(&dir.join("predictions.jsonl")), 200);
    assert_eq!(
        jsonl_len(&dir.join("rectified.jsonl")) + jsonl_len(&dir.join("failures.jsonl")),
        200
    );
    let results: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(dir.join("results.jsonl")).unwrap().lines().next().unwrap())
            .unwrap();
    assert!(results["accuracy_after"].as_f64().unwrap() >= results["accuracy_before"].as_f64().unwrap());
    let transition: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("transition.json")).unwrap()).unwrap();
    assert!(transition.to_string().contains("sha256"));
    assert!(dir.join("finetune.jsonl").exists());
    assert!(std::fs::read_to_string(dir.join("ood.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn missing_inputs_exit_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = step(tmp.path(), &["estimate-t"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    std::fs::write(&config, r#"{"rho": 0}"#).unwrap();
    small_world(tmp.path());
    let out = step(tmp.path(), &["--config", config.to_str().unwrap(), "sample-support"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unreachable_backend_exits_with_backend_code() {
    let tmp = tempfile::tempdir().unwrap();
    small_world(tmp.path());
    assert!(step(tmp.path(), &["sample-support"]).status.success());
    assert!(step(tmp.path(), &["estimate-t"]).status.success());
    let out = step(tmp.path(), &["--backend", "remote:http://127.0.0.1:9", "therapy"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = golden_spec();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = mvt(&["simulate", "--spec", spec.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert!(out.status.success());
    }
    for f in ["manifest.jsonl", "predictions.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
