use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hecnn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hecnn")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

/// Header line plus little-endian f64 data.
fn write_input(path: &Path, shape: [usize; 3]) {
    let n = shape.iter().product::<usize>();
    let mut bytes = format!("{{\"dtype\":\"<f8\",\"shape\":[{},{},{}]}}\n", shape[0], shape[1], shape[2]).into_bytes();
    for i in 0..n {
        bytes.extend(((i as f64) * 0.37).sin().to_le_bytes());
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn levels_row_for_rn18() {
    let d = tmp();
    let out = hecnn(&["levels", "--strategy", "all", "--variant", "rn18"], d.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.ends_with("87 70 53 35 35 18")), "{text}");
}

#[test]
fn levels_match_golden_files() {
    let d = tmp();
    let out = hecnn(&["levels"], d.path());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden("levels.txt"));
    let out = hecnn(&["levels", "--json", "--variant", "rn20"], d.path());
    assert_eq!(ok_json(&out), serde_json::from_str::<Value>(&golden("levels_rn20.json")).unwrap());
    let one = hecnn(&["levels", "--strategy", "p2frt", "--variant", "rn32"], d.path());
    assert_eq!(String::from_utf8(one.stdout).unwrap(), "variant P2FRT\nrn32 32\n");
}

#[test]
fn fit_poly_matches_golden_file() {
    let d = tmp();
    let v = ok_json(&hecnn(&["fit-poly"], d.path()));
    assert_eq!(v, serde_json::from_str::<Value>(&golden("fit_poly.json")).unwrap());
    let v = ok_json(&hecnn(&["fit-poly", "--degree", "4", "--clip", "3", "--bits", "8"], d.path()));
    assert_eq!(v["int_coeffs"].as_array().unwrap().len(), 5);
    assert_eq!(v["in_box"], true);
}

#[test]
fn compare_passes_on_rn18() {
    let d = tmp();
    let v = ok_json(&hecnn(&["compare", "--variant", "rn18", "--trials", "20"], d.path()));
    assert_eq!(v["pass"], true);
    let names: Vec<&str> = v["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["transform-equivalence", "level-table", "simulator-fidelity"]);
    assert!(v["checks"][2]["value"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn injected_fault_names_the_transform_check() {
    let d = tmp();
    let out = hecnn(&["compare", "--variant", "rn20", "--trials", "5", "--inject-fault"], d.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL: transform-equivalence"));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["checks"][0]["pass"], false);
}

#[test]
fn usage_errors_exit_with_two() {
    let d = tmp();
    for args in [
        vec!["compile", "--variant", "rn20", "--strategy", "p9"],
        vec!["compile", "--model", "missing.json"],
        vec!["levels", "--variant", "rn99"],
        vec!["no-such-command"],
        vec!["compile"],
    ] {
        assert_eq!(hecnn(&args, d.path()).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn plan_reproduces_preset_total() {
    let d = tmp();
    let v = ok_json(&hecnn(&["plan", "--preset", "rn20"], d.path()));
    assert_eq!(v["log2_q"], 906);
    assert_eq!(v["rescales"], 20);
    assert_eq!(v["plan"]["preset"], "rn20");
    // Rescales per node; parallel branches each settle their own, so the sum exceeds the depth.
    let schedule = v["schedule"].as_object().unwrap();
    assert!(schedule.keys().all(|k| k.parse::<usize>().is_ok()));
    assert!(schedule.values().map(|x| x.as_u64().unwrap()).sum::<u64>() >= 20);
    // The preset is sized for tower reuse; one sublevel per modulus needs twice as many.
    let out = hecnn(&["plan", "--preset", "rn20", "--sublevel", "1"], d.path());
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn compile_then_run_is_deterministic() {
    let d = tmp();
    ok_json(&hecnn(&["compile", "--variant", "rn20", "--out", "a.json", "--emit-program", "prog.json"], d.path()));
    ok_json(&hecnn(&["compile", "--variant", "rn20", "--seed", "1", "--out", "b.json"], d.path()));
    write_input(&d.path().join("x.bin"), [3, 8, 8]);
    let solo = ok_json(&hecnn(&["run", "--model", "a.json", "--input", "x.bin", "--trace"], d.path()));
    let again = ok_json(&hecnn(&["run", "--program", "prog.json", "--input", "x.bin", "--trace"], d.path()));
    assert_eq!(solo, again);
    assert_eq!(solo["final_level"], 0);
    let trace = solo["trace"].as_array().unwrap();
    assert_eq!(trace[0]["op"], "encode");
    assert!(trace.iter().all(|t| t["sublevel"].as_u64().unwrap() <= 4));

    let both = ok_json(&hecnn(&["run", "--model", "a.json", "--model", "b.json", "--input", "x.bin"], d.path()));
    assert_eq!(both["members"].as_array().unwrap().len(), 2);
    assert_eq!(both["members"][0], solo["members"][0]);
    assert!(both.get("trace").is_none());
}

#[test]
fn run_with_preset_primes() {
    let d = tmp();
    ok_json(&hecnn(&["compile", "--variant", "rn20", "--out", "m.json"], d.path()));
    assert!(hecnn(&["plan", "--preset", "rn20", "--out", "plan.json"], d.path()).status.success());
    write_input(&d.path().join("x.bin"), [3, 8, 8]);
    let exact = ok_json(&hecnn(&["run", "--model", "m.json", "--input", "x.bin"], d.path()));
    let primes =
        ok_json(&hecnn(&["run", "--model", "m.json", "--plan", "plan.json", "--moduli", "primes", "--input", "x.bin"], d.path()));
    let (a, b) = (exact["averaged"].as_array().unwrap(), primes["averaged"].as_array().unwrap());
    let scale = a.iter().map(|v| v.as_f64().unwrap().abs()).fold(0.0, f64::max);
    let diff = a.iter().zip(b).map(|(x, y)| (x.as_f64().unwrap() - y.as_f64().unwrap()).abs()).fold(0.0, f64::max);
    assert!(diff / scale < 1e-2, "{diff}");
    write_input(&d.path().join("bad.bin"), [1, 8, 8]);
    assert_eq!(hecnn(&["run", "--model", "m.json", "--input", "bad.bin"], d.path()).status.code(), Some(2));
}

#[test]
fn cluster_modes_write_models() {
    let d = tmp();
    ok_json(&hecnn(&["compile", "--variant", "rn20", "--out", "a.json"], d.path()));
    ok_json(&hecnn(&["compile", "--variant", "rn20", "--seed", "3", "--out", "b.json"], d.path()));
    let r = ok_json(&hecnn(&["cluster", "--model", "a.json", "--k", "3", "--seed", "5", "--out-dir", "q"], d.path()));
    assert_eq!(r["mode"], "slice");
    assert!(r["slices"].as_array().unwrap().iter().all(|s| s["encodings"].as_u64().unwrap() <= 3));
    assert!(d.path().join("q/a.clustered.json").exists());
    let again = ok_json(&hecnn(&["cluster", "--model", "a.json", "--k", "3", "--seed", "5"], d.path()));
    assert_eq!(r, again);
    let e = ok_json(&hecnn(&["cluster", "--mode", "ensemble", "--model", "a.json", "--model", "b.json", "--k", "3"], d.path()));
    assert_eq!(e["models"], 2);
    assert!(e["encodings"].as_u64().unwrap() <= e["independent_bound"].as_u64().unwrap());
    let f = ok_json(&hecnn(&["cluster", "--mode", "full", "--model", "a.json", "--k", "8"], d.path()));
    assert_eq!(f["codebooks"].as_array().unwrap().len(), 1);
    let two = hecnn(&["cluster", "--mode", "slice", "--model", "a.json", "--model", "b.json"], d.path());
    assert_eq!(two.status.code(), Some(2));
}

#[test]
fn train_lab_writes_csv_and_report() {
    let d = tmp();
    let out = hecnn(&["train-lab", "--csv", "log.csv", "--report", "lemmas.json", "--seed", "2"], d.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.path().join("log.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,loss,ce,pen,zeta,accuracy"));
    assert_eq!(lines.count(), 20);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("lemmas.json")).unwrap()).unwrap();
    assert_eq!(r["lemmas"]["pass"], true);
    assert_eq!(r["config"]["seed"], 2);
    assert!(r["final_accuracy"].as_f64().unwrap() >= 0.95);

    let ramp = hecnn(&["train-lab", "--warmup-epochs", "3", "--epochs", "4", "--lemma-states", "2"], d.path());
    let text = String::from_utf8(ramp.stdout).unwrap();
    let zetas: Vec<f64> = text.lines().skip(1).take(4).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert_eq!(zetas, [0.25e-3, 0.5e-3, 0.75e-3, 1e-3]);
    let bad = hecnn(&["train-lab", "--warmup-factors", "0.5,0.2"], d.path());
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_file_fills_in_and_flags_win() {
    let d = tmp();
    std::fs::write(d.path().join("cfg.json"), r#"{"strategy": "p2f", "seed": 4}"#).unwrap();
    let v = ok_json(&hecnn(&["--config", "cfg.json", "compile", "--variant", "rn20"], d.path()));
    assert_eq!(v["strategy"], "p2f");
    let v = ok_json(&hecnn(&["compile", "--config", "cfg.json", "--variant", "rn20", "--strategy", "p2r"], d.path()));
    assert_eq!(v["strategy"], "p2r");
    std::fs::write(d.path().join("bad.json"), r#"{"strategy": "p2", "preset": "rn20"}"#).unwrap();
    assert_eq!(hecnn(&["--config", "bad.json", "levels"], d.path()).status.code(), Some(2));
    std::fs::write(d.path().join("typo.json"), r#"{"stratgy": "p2"}"#).unwrap();
    assert_eq!(hecnn(&["--config", "typo.json", "levels"], d.path()).status.code(), Some(2));
}

#[test]
fn help_documents_every_flag() {
    let d = tmp();
    for cmd in ["fit-poly", "compile", "levels", "plan", "cluster", "train-lab", "run", "compare"] {
        let out = hecnn(&[cmd, "--help"], d.path());
        let text = String::from_utf8(out.stdout).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate().filter(|(_, l)| l.trim_start().starts_with("--")) {
            // Short help sits on the flag's line; long help on the next one.
            let rest = line.trim_start().split_once("  ").map_or("", |(_, r)| r.trim());
            let next = lines.get(i + 1).map_or("", |l| l.trim());
            assert!(!rest.is_empty() || !(next.is_empty() || next.starts_with('-')), "{cmd}: undocumented {line}");
        }
    }
}
