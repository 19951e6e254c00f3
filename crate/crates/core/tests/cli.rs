use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn listennet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_listennet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn jsonl(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = listennet(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--subjects",
        "2",
        "--trials",
        "4",
        "--duration",
        "6",
        "--snr",
        "20",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data.join("manifest.toml")
}

#[test]
fn audit_reports_counts() {
    let out = listennet(&["audit"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("3340"), "{text}");
    assert!(text.contains("8734968"), "{text}");

    let out = listennet(&["audit", "--channels", "32", "--json"]);
    let rows = jsonl(&out);
    assert_eq!(rows[0]["params"], 2316);

    let no_mste = jsonl(&listennet(&["audit", "--no-mste", "--json"]));
    assert_eq!(no_mste[0]["breakdown"]["mste"], 0);
}

#[test]
fn gradcheck_with_injected_fault_exits_nonzero() {
    let out = listennet(&["gradcheck", "--inject-fault", "--samples", "16"]);
    assert_eq!(out.status.code(), Some(3));
    let rows = jsonl(&out);
    assert!(rows.iter().any(|r| r["pass"] == false));
}

#[test]
fn validation_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = listennet(&["train", "--manifest", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let manifest = synth(dir.path());
    let out = listennet(&["train", "--manifest", manifest.to_str().unwrap(), "--batch-size", "0"]);
    assert_eq!(out.status.code(), Some(1));

    let bad_config = dir.path().join("bad.toml");
    fs::write(&bad_config, "seed = 1\nunknown_key = 3\n").unwrap();
    let out = listennet(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        bad_config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_config_and_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let config = dir.path().join("run.toml");
    let from_file = dir.path().join("from-file");
    let from_flag = dir.path().join("from-flag");
    fs::write(
        &config,
        format!(
            "seed = 2\noutput_dir = {:?}\n[train]\nmax_epochs = 4\n",
            from_file.to_str().unwrap()
        ),
    )
    .unwrap();

    let out = listennet(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        from_flag.to_str().unwrap(),
        "--max-epochs",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!from_file.exists());
    let summary = jsonl(&out);
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0]["subject"], "s01");

    let history = fs::read_to_string(from_flag.join("history-s01.jsonl")).unwrap();
    assert!(history.lines().count() <= 2);
    let run: Value = serde_json::from_str(&fs::read_to_string(from_flag.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 2);
    assert_eq!(run["train"]["max_epochs"], 2);

    let model = from_flag.join("model-s01.json");
    let out = listennet(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = jsonl(&out);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r["accuracy"].as_f64().unwrap())));
}

#[test]
fn prep_writes_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let prepared = dir.path().join("prepared");
    let out = listennet(&[
        "prep",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        prepared.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let new_manifest = PathBuf::from(String::from_utf8_lossy(&out.stdout).trim());
    assert!(new_manifest.exists());
    assert!(prepared.join("alignment.json").exists());

    // The prepared data trains like the original.
    let out = listennet(&[
        "train",
        "--manifest",
        new_manifest.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--max-epochs",
        "1",
        "--align",
        "false",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
