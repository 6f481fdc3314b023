use std::path::Path;
use std::process::{Command, Output};

fn icheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icheck")).args(args).output().expect("icheck runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"{
  "name": "small",
  "launch": "process",
  "app": {
    "name": "small", "world_size": 2, "iterations": 12, "checkpoint_interval": 4, "seed": 3,
    "regions": [{"id": "a", "count": 4096, "elem_size": 8, "scheme": "BLOCK"}]
  },
  "cluster": {"icheck_nodes": [{"id": "n0", "capacity": 268435456}]},
  "rm_script": [{"at_iteration": 6, "action": "KILL_APP", "app": "small"}]
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn validate_accepts_shipped_scenarios() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for e in std::fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        let o = icheck(&["validate", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}: {}", p.display(), stdout(&o));
    }
}

#[test]
fn validate_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL.replace(r#""world_size": 2"#, r#""world_size": 0"#).replace(r#""scheme": "BLOCK""#, r#""scheme": "DIAGONAL""#);
    let f = write(dir.path(), "bad.json", &bad);
    let o = icheck(&["validate", &f]);
    assert!(!o.status.success());
    assert!(!stdout(&o).is_empty());
}

#[test]
fn run_then_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "small.json", SMALL);
    let out = dir.path().join("out");
    let o = icheck(&["run", "--scenario", &f, "--out", out.to_str().unwrap()]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}\n{}", String::from_utf8_lossy(&o.stderr));
    assert!(text.starts_with("PASS"), "{text}");
    assert!(text.contains("restores=1"), "{text}");
    for r in 0..2 {
        assert!(out.join(format!("rank{r}.csv")).exists());
    }
    assert!(out.join("verdict.json").exists());

    let s = icheck(&["summarize", out.to_str().unwrap()]);
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    assert!(!stdout(&s).is_empty());
}

#[test]
fn summarize_missing_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = icheck(&["summarize", dir.path().join("nope").to_str().unwrap()]);
    assert!(!o.status.success());
}
