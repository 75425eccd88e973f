use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &["--n-prompt", "128", "--steps", "8", "--d-model", "64"];

fn kvlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvlab"))
        .current_dir(dir)
        .env_remove("KVLAB_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kvlab(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    kvlab(dir, args).status.code().unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

/// Default shape is 8 layers of 8 query heads.
fn importance_file(dir: &Path, name: &str, value: f64) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string(&vec![vec![value; 8]; 8]).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn records(profile: &Value) -> impl Iterator<Item = &Value> {
    profile.as_array().unwrap().iter().flat_map(|l| l.as_array().unwrap())
}

fn f(v: &Value, key: &str) -> f64 {
    v[key].as_f64().unwrap()
}

fn persistent(plan: &Value) -> Vec<Vec<u64>> {
    plan["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["persistent_heads"].as_array().unwrap().iter().map(|h| h.as_u64().unwrap()).collect())
        .collect()
}

#[test]
fn frozen_walk_profiles_full_similarity() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &with_small(&["profile", "--sigma", "0", "--epsilon", "0.1", "-o", "p.json"]));
    let p = read_json(&tmp.path().join("p.json"));
    for r in records(&p) {
        assert!((f(r, "s_hat") - 1.0).abs() < 1e-9);
        assert!((f(r, "D") - (f(r, "tau") - 1.0 + 0.1)).abs() < 1e-12);
    }
}

#[test]
fn uniform_importance_gives_eta_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    importance_file(tmp.path(), "ones.json", 1.0);
    ok(
        tmp.path(),
        &with_small(&["profile", "--importance", "ones.json", "--eta", "0.7", "-o", "p.json"]),
    );
    for r in records(&read_json(&tmp.path().join("p.json"))) {
        assert!((f(r, "tau") - 0.7).abs() < 1e-12);
    }
}

#[test]
fn profile_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &with_small(&["profile", "--seed", "3", "-o", "a.json"]));
    ok(tmp.path(), &with_small(&["profile", "--seed", "3", "-o", "b.json"]));
    assert_eq!(fs::read(tmp.path().join("a.json")).unwrap(), fs::read(tmp.path().join("b.json")).unwrap());
}

#[test]
fn unimportant_heads_leave_only_first_layer_persistent() {
    let tmp = tempfile::tempdir().unwrap();
    importance_file(tmp.path(), "zeros.json", 0.0);
    ok(tmp.path(), &with_small(&["profile", "--importance", "zeros.json", "-o", "p.json"]));
    let table = ok(tmp.path(), &with_small(&["plan", "--profile", "p.json", "-o", "plan.json"]));
    assert!(table.starts_with("layer"));
    let plan = persistent(&read_json(&tmp.path().join("plan.json")));
    assert_eq!(plan[0], vec![0, 1]);
    assert!(plan[1..].iter().all(Vec::is_empty));
}

#[test]
fn no_prefetch_slack_keeps_every_difficult_head() {
    let tmp = tempfile::tempdir().unwrap();
    importance_file(tmp.path(), "ones.json", 1.0);
    ok(
        tmp.path(),
        &with_small(&["profile", "--importance", "ones.json", "--sigma", "1.5", "-o", "p.json"]),
    );
    ok(tmp.path(), &with_small(&["plan", "--profile", "p.json", "--t-comp", "1e-12", "-o", "plan.json"]));
    let profile = read_json(&tmp.path().join("p.json"));
    let plan = read_json(&tmp.path().join("plan.json"));
    assert_eq!(plan["prefetchable_heads"], 0);
    for (l, (layer, heads)) in profile.as_array().unwrap().iter().zip(persistent(&plan)).enumerate() {
        let expected: Vec<u64> = layer
            .as_array()
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(_, r)| l == 0 || f(r, "D") > 0.0)
            .map(|(h, _)| h as u64)
            .collect();
        assert_eq!(heads, expected, "layer {l}");
    }
}

#[test]
fn budget_drops_easiest_heads_first() {
    let tmp = tempfile::tempdir().unwrap();
    importance_file(tmp.path(), "ones.json", 1.0);
    ok(
        tmp.path(),
        &with_small(&["profile", "--importance", "ones.json", "--sigma", "1.5", "-o", "p.json"]),
    );
    ok(tmp.path(), &with_small(&["plan", "--profile", "p.json", "--t-comp", "1e-12", "-o", "full.json"]));
    let full = read_json(&tmp.path().join("full.json"));
    let layer0 = full["persistent_bytes"].as_u64().unwrap() / 8;
    // Room for layer 0 and four more heads.
    let budget = (layer0 * 3).to_string();
    ok(
        tmp.path(),
        &with_small(&["plan", "--profile", "p.json", "--t-comp", "1e-12", "--hbm-budget", &budget, "-o", "cut.json"]),
    );
    let cut = read_json(&tmp.path().join("cut.json"));
    assert_eq!(cut["persistent_bytes"].as_u64().unwrap(), layer0 * 3);
    assert_eq!(cut["shortfall_heads"], 10);
    let profile = read_json(&tmp.path().join("p.json"));
    let d = |l: usize, h: u64| f(&profile[l][h as usize], "D");
    let kept: Vec<f64> = persistent(&cut)
        .iter()
        .enumerate()
        .skip(1)
        .flat_map(|(l, hs)| hs.iter().map(move |&h| d(l, h)))
        .collect();
    let dropped: Vec<f64> = cut["layers"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .flat_map(|(l, x)| x["dropped_heads"].as_array().unwrap().iter().map(move |h| (l, h.as_u64().unwrap())))
        .map(|(l, h)| d(l, h))
        .collect();
    assert_eq!((kept.len(), dropped.len()), (4, 10));
    let min_kept = kept.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(dropped.iter().all(|&x| x <= min_kept), "kept {kept:?} dropped {dropped:?}");
}

#[test]
fn budget_below_first_layer_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &with_small(&["profile", "-o", "p.json"]));
    let out = kvlab(tmp.path(), &with_small(&["plan", "--profile", "p.json", "--hbm-budget", "10", "-o", "x.json"]));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("first layer"));
    assert!(!tmp.path().join("x.json").exists());
}

#[test]
fn zero_steps_writes_no_decode_rows() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["run", "--n-prompt", "64", "--steps", "0", "--d-model", "64", "--out-dir", "runs"]);
    let cell = tmp.path().join("runs/run-0001");
    let breakdowns: Vec<PathBuf> = walk(&cell).into_iter().filter(|p| p.ends_with("breakdown.csv")).collect();
    assert_eq!(breakdowns.len(), 1);
    assert_eq!(fs::read_to_string(&breakdowns[0]).unwrap().lines().count(), 1);
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn run_prints_one_section_per_policy_and_report_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = with_small(&["run", "--policy", "similarity", "--policy", "lfu", "--no-error"]);
    args.extend(["--out-dir", "runs"]);
    let stdout = ok(tmp.path(), &args);
    assert!(stdout.contains("== similarity =="));
    assert!(stdout.contains("== lfu =="));
    assert!(stdout.contains("run-0001"));
    let report = ok(tmp.path(), &["report", "runs/run-0001"]);
    let summary = stdout.split("\nrun directory").next().unwrap();
    assert_eq!(report.trim_end(), summary.trim_end());
}

#[test]
fn out_dir_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kvlab"))
        .current_dir(tmp.path())
        .env("KVLAB_OUT_DIR", tmp.path().join("envruns"))
        .args(with_small(&["run", "--no-error"]))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("envruns/run-0001/summary.csv").is_file());
    assert!(tmp.path().join("envruns/run-0001/manifest.json").is_file());
}

#[test]
fn exit_codes_separate_usage_config_and_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["run", "--bogus"]), 2);
    assert_eq!(code(d, &["plan", "--profile", "missing.json", "-o", "x.json"]), 2);
    assert_eq!(code(d, &["run", "--config", "missing.json"]), 2);
    assert_eq!(code(d, &with_small(&["run", "--policy", "fifo"])), 3);
    assert_eq!(code(d, &with_small(&["run", "--eta", "1.5"])), 3);
    fs::write(d.join("bad.json"), "{\"no_such_field\": 1}").unwrap();
    assert_eq!(code(d, &["run", "--config", "bad.json"]), 3);
    fs::write(d.join("afile"), "").unwrap();
    assert_eq!(code(d, &with_small(&["run", "--no-error", "--out-dir", "afile"])), 4);
}
