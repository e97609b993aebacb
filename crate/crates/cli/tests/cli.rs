use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = include_str!("../../../configs/tiny.json");

fn glcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glcn")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
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

fn error_line(o: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not a JSON error line: {stderr} ({e})"))
}

#[test]
fn gen_data_with_a_fixed_seed_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for wd in [&a, &b] {
        let o = glcn(&["--workdir", path(wd), "--config", path(&cfg), "--seed", "7", "gen-data"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(tree(&a), tree(&b));
    let stored: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(stored["seed"], 7);

    // an existing dataset is kept unless replacement is requested
    let o = glcn(&["--workdir", path(&a), "--seed", "8", "gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"], "invalid_input");
    assert_eq!(tree(&a), tree(&b));
    assert!(glcn(&["--workdir", path(&a), "--seed", "8", "gen-data", "--overwrite"]).status.success());
    assert_ne!(tree(&a), tree(&b));
}

#[test]
fn evaluate_without_a_checkpoint_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let wd = dir.path().join("work");
    assert!(glcn(&["--workdir", path(&wd), "--config", path(&cfg), "gen-data"]).status.success());
    let o = glcn(&["--workdir", path(&wd), "evaluate", "--combo", "embedding", "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"], "missing_artifact");
    assert!(e["path"].as_str().unwrap().ends_with("models/agg/embedding/seed0.ckpt"), "{e}");
}

#[test]
fn missing_config_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = glcn(&["--workdir", path(dir.path()), "train-local"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["path"].as_str().unwrap().ends_with("config.json"));
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["data"]["ambiguous_fraction"] = 1.5.into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = glcn(&["--workdir", path(dir.path()), "--config", path(&cfg), "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "config");

    std::fs::write(&cfg, "{ not json").unwrap();
    let o = glcn(&["--workdir", path(dir.path()), "--config", path(&cfg), "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(glcn(&["gen-data", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(glcn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(glcn(&["curve", "--combo", "texture"]).status.code(), Some(1));
    let help = glcn(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("train-agg"));
}

#[test]
fn tiny_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let wd = dir.path().join("work");
    let w = path(&wd);
    let steps: [&[&str]; 7] = [
        &["--workdir", w, "--config", path(&cfg), "gen-data"],
        &["--workdir", w, "train-context"],
        &["--workdir", w, "train-local"],
        &["--workdir", w, "train-agg", "--combo", "embedding+saliency,indicator", "--seeds", "0"],
        &["--workdir", w, "evaluate", "--combo", "embedding+saliency", "--seeds", "0"],
        &["--workdir", w, "curve", "--combo", "embedding+saliency", "--agg-seed", "0"],
        &["--workdir", w, "ablate"],
    ];
    for args in steps {
        let o = glcn(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let table = std::fs::read_to_string(wd.join("ablation/table.txt")).unwrap();
    assert!(table.contains("absent"), "{table}");

    let manifest = wd.join("eval/embedding+saliency/seed0/evaluate.run.json");
    let before = std::fs::read(wd.join("eval/embedding+saliency/seed0/records.csv")).unwrap();
    let o = glcn(&["--workdir", w, "evaluate", "--replay", path(&manifest)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(wd.join("eval/embedding+saliency/seed0/records.csv")).unwrap(), before);
}
