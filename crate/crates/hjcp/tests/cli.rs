use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn hjcp(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjcp"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn hjcp")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = hjcp(out, args);
    assert!(o.status.success(), "hjcp {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn manifest(stdout: &str) -> serde_json::Value {
    let path = stdout.lines().find_map(|l| l.strip_prefix("manifest: ")).expect("manifest line");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn eval_before_calibrate_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train"]);
    let o = hjcp(dir.path(), &["eval"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("calibrate"));
}

#[test]
fn report_on_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!hjcp(dir.path(), &["report"]).status.success());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"membrs": 3}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hjcp"))
        .arg("--config")
        .arg(&cfg)
        .arg("train")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("membrs"));
}

#[test]
fn pipeline_writes_tables_traces_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let train = manifest(&ok(out, &["train"]));
    assert_eq!(train["command"], "train");
    let models = train["produced"].as_array().unwrap().iter().filter(|a| a["kind"] == "model").count();
    assert_eq!(models, 2);

    let cal = manifest(&ok(out, &["calibrate"]));
    assert!(!cal["consumed"].as_array().unwrap().is_empty());

    let stdout = ok(out, &["eval", "--strategy", "single", "--trials", "4"]);
    let eval = manifest(&stdout);
    assert!(eval["pairing"].is_string());
    let csv = std::fs::read_to_string(out.join("reports/eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("alpha,policy,kind,members,strategy,trials,violations"));
    let rows: Vec<&str> = lines.collect();
    // nominal, two members, one single-strategy ensemble
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| !r.contains("multiple")));
    let traces = std::fs::read_dir(out.join("traces")).unwrap().count();
    assert_eq!(traces, 4 * 2);

    ok(out, &["certify", "--ncert", "10"]);
    let cert = std::fs::read_to_string(out.join("reports/certify.csv")).unwrap();
    // header plus one row per certified policy
    assert_eq!(cert.lines().count(), 1 + 3);
    let summary = ok(out, &["report"]);
    assert!(summary.contains("certify"));
}

#[test]
fn seed_flag_changes_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let hashes = |s: &str| -> Vec<String> {
        manifest(s)["produced"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| a["hash"].as_str().unwrap().to_owned())
            .collect()
    };
    let first = hashes(&ok(a.path(), &["train", "--seed", "1"]));
    let second = hashes(&ok(b.path(), &["train", "--seed", "2"]));
    assert_ne!(first, second);
}
