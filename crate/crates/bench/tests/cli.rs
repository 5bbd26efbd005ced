//! Exit codes, error lines and reproducibility of the command-line tool.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
# small toy run
model.d = 16
calib.nsamples = 8
calib.seq_len = 16
train.epochs = 2
";

struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("slicequant-cli-{}-{name}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        Self(dir)
    }

    fn file(&self, name: &str, text: &str) -> PathBuf {
        let p = self.0.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slicequant-bench"))
        .args(args)
        .env_remove("MOBI_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn full_run(cfg: &Path, out: &Path, seed: &str) {
    for args in [
        vec!["--seed", seed, "--out", p(out), "calibrate", p(cfg)],
        vec!["--out", p(out), "eval", "--targets", "3", "4"],
        vec!["--out", p(out), "pack"],
        vec!["--out", p(out), "migration"],
    ] {
        let o = run(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn same_seed_same_directory() {
    let s = Scratch::new("repro");
    let cfg = s.file("small.cfg", SMALL);
    let (a, b, c) = (s.0.join("a"), s.0.join("b"), s.0.join("c"));
    full_run(&cfg, &a, "7");
    full_run(&cfg, &b, "7");
    full_run(&cfg, &c, "8");
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(fa.len(), 11);
    assert_eq!(fa, fb);
    assert_ne!(fa, dir_bytes(&c));
}

#[test]
fn seed_falls_back_to_environment() {
    let s = Scratch::new("env");
    let cfg = s.file("small.cfg", SMALL);
    let (a, b) = (s.0.join("a"), s.0.join("b"));
    assert!(run(&["--seed", "5", "--out", p(&a), "calibrate", p(&cfg)]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_slicequant-bench"))
        .args(["--out", p(&b), "calibrate", p(&cfg)])
        .env("MOBI_SEED", "5")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let report = run(&["--out", p(&b), "report"]);
    assert!(String::from_utf8_lossy(&report.stdout).contains("seed: 5"));
}

#[test]
fn out_of_range_target_is_a_warning() {
    let s = Scratch::new("targets");
    let cfg = s.file("small.cfg", SMALL);
    let out = s.0.join("run");
    assert!(run(&["--out", p(&out), "calibrate", p(&cfg)]).status.success());
    let o = run(&["--out", p(&out), "eval", "--targets", "99"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("target 99 skipped"), "{}", stderr(&o));
    let notes = std::fs::read_to_string(out.join("eval_notes.txt")).unwrap();
    assert!(notes.contains("99"));
}

#[test]
fn csv_tables_document_their_columns() {
    let s = Scratch::new("schema");
    let cfg = s.file("small.cfg", SMALL);
    let out = s.0.join("run");
    full_run(&cfg, &out, "1");
    for name in ["layers", "eval", "eval_blocks", "eval_hist", "pack", "migration", "migration_tokens"] {
        let text = std::fs::read_to_string(out.join(format!("{name}.csv"))).unwrap();
        let mut lines = text.lines();
        let schema = lines.next().unwrap();
        assert!(schema.starts_with(&format!("# schema={name} v1; ")), "{schema}");
        for col in lines.next().unwrap().split(',') {
            assert!(schema.contains(&format!("{col}: ")), "{name}: `{col}` undocumented");
        }
    }
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().next().unwrap(), r#"{"schema":"train_log","version":1}"#);
    assert!(log.lines().nth(1).unwrap().contains("\"b_sched\""));
}

#[test]
fn invalid_config_names_the_field() {
    let s = Scratch::new("badcfg");
    let cfg = s.file("bad.cfg", "train.epochs = 0\n");
    let o = run(&["--out", p(&s.0.join("x")), "calibrate", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let line = stderr(&o);
    assert!(line.starts_with("error: kind=config field=train.epochs "), "{line}");

    let cfg = s.file("typo.cfg", "sched.shpe = log\n");
    let o = run(&["calibrate", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("field=sched.shpe"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["calibrate", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let s = Scratch::new("missing");
    let o = run(&["--out", p(&s.0), "report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=checkpoint "));
}

#[test]
fn grad_check_reports_json() {
    let o = run(&["grad-check", "--seed", "2"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["router_max_rel"].as_f64().unwrap() <= 1e-6);
}
