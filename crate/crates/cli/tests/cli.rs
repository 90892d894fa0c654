use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn racr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_racr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = racr(args);
    assert!(
        out.status.success(),
        "racr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL_SPEC: &str = r#"{"class_counts": [7, 5, 5, 5], "bag_size": [10, 16], "feature_dim": 8}"#;

fn small_dataset(dir: &Path) -> String {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, SMALL_SPEC).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap(), "--seed", "7"]);
    data.to_str().unwrap().to_string()
}

#[test]
fn synth_twice_gives_identical_trees() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = small_dataset(a.path());
    let db = small_dataset(b.path());
    let (ta, tb) = (tree(Path::new(&da)), tree(Path::new(&db)));
    assert_eq!(ta.len(), 22 * 2);
    assert_eq!(ta, tb);
}

#[test]
fn gradcheck_passes_on_default_config() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("gradcheck PASS"), "{out}");
    let out = ok(&["gradcheck", "--literal", "--instances", "2"]);
    assert!(out.contains("gradcheck PASS"), "{out}");
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let out = racr(&["eval", "--data", "x", "--out", "y"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn unknown_flag_and_missing_input_fail() {
    assert!(!racr(&["synth", "--out", "x", "--bogus"]).status.success());
    let missing = racr(&["graph", "--data", "/nonexistent/racr", "--out", "/tmp/racr-never"]);
    assert!(!missing.status.success());
    assert!(!String::from_utf8_lossy(&missing.stderr).is_empty());
}

#[test]
fn pipeline_train_eval_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    let cfg = p("cfg.json");
    std::fs::write(&cfg, r#"{"d_h": 8, "max_epochs": 3}"#).unwrap();
    ok(&["graph", "--data", &data, "--out", &p("graphs"), "--config", &cfg]);
    assert_eq!(std::fs::read_dir(p("graphs")).unwrap().count(), 22);

    // Flags override the config file, which overrides the preset.
    let run = |out: &str, jobs: &str| {
        ok(&[
            "train", "--data", &data, "--out", &p(out), "--config", &cfg, "--epochs", "2", "--lr", "1e-3", "--seed", "3",
            "--jobs", jobs,
        ])
    };
    run("run1", "1");
    run("run2", "2");
    let effective: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("run1/config.json")).unwrap()).unwrap();
    assert_eq!(effective["d_h"], 8);
    assert_eq!(effective["max_epochs"], 2);
    assert_eq!(effective["seed"], 3);
    assert_eq!(effective["lambda1"], 0.2);
    assert_eq!(tree(Path::new(&p("run1"))), tree(Path::new(&p("run2"))));
    let log = std::fs::read_to_string(p("run1/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ckpt = p("run1/checkpoint");
    let out = ok(&[
        "eval", "--checkpoint", &ckpt, "--data", &data, "--out", &p("eval"), "--split", &p("run1/split.json"),
    ]);
    assert!(out.contains("macro-F1"));
    for f in ["metrics.json", "confusion.csv", "pr.csv", "pr.png"] {
        assert!(dir.path().join("eval").join(f).is_file(), "{f}");
    }
    let mut bags: Vec<_> = std::fs::read_dir(&data).unwrap().map(|e| e.unwrap().path()).collect();
    bags.sort();
    let bag = &bags[0];
    ok(&["heatmap", "--checkpoint", &ckpt, "--bag", bag.to_str().unwrap(), "--out", &p("maps")]);
    assert_eq!(std::fs::read_dir(p("maps")).unwrap().count(), 2);
}
