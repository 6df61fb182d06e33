use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ionctl"))
}

fn bench(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/benchmarks").join(file)
}

fn data(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(file)
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (
        status.code().unwrap_or(-1),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn compile_all_writes_every_stage_and_hashes_match() {
    let out = tempfile::tempdir().unwrap();
    let (code, _, err) = run(bin().args(["compile", "--emit", "all", "-o"]).arg(out.path()).arg(bench("active_feedback.json")));
    assert_eq!(code, 0, "{err}");
    let m = manifest(out.path());
    let arts = m["artifacts"].as_array().unwrap();
    let kinds: Vec<&str> = arts.iter().map(|a| a["kind"].as_str().unwrap()).collect();
    for k in ["tree", "cfg", "ssa", "liveness", "igraph", "alloc", "asm"] {
        assert_eq!(kinds.iter().filter(|x| **x == k).count(), 1, "{k}");
    }
    assert_eq!(kinds.iter().filter(|x| **x == "binary").count(), 2);
    assert_eq!(kinds.iter().filter(|x| **x == "steptable").count(), 2);
    for a in arts {
        let bytes = fs::read(out.path().join(a["path"].as_str().unwrap())).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), a["sha256"].as_str().unwrap());
    }
    let stages: Vec<&str> = m["timings"].as_array().unwrap().iter().map(|t| t["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["parse", "validate", "cfg", "ssa", "out-of-ssa", "regalloc", "steptable", "codegen"]);
}

#[test]
fn emit_cfg_writes_one_stage_file() {
    let out = tempfile::tempdir().unwrap();
    let (code, _, _) = run(bin().args(["compile", "--emit=cfg", "-o"]).arg(out.path()).arg(bench("simple_pulse.json")));
    assert_eq!(code, 0);
    let m = manifest(out.path());
    let stage_files: Vec<&str> = m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| !["binary", "steptable", "boards"].contains(&a["kind"].as_str().unwrap()))
        .map(|a| a["path"].as_str().unwrap())
        .collect();
    assert_eq!(stage_files, ["cfg.dot"]);
}

#[test]
fn recompiling_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let (code, _, _) = run(bin().args(["compile", "--emit", "all", "-o"]).arg(d.path()).arg(bench("multi_var_feedback.json")));
        assert_eq!(code, 0);
    }
    let hashes = |d: &Path| {
        let m = manifest(d);
        m["artifacts"].clone()
    };
    assert_eq!(hashes(a.path()), hashes(b.path()));
}

#[test]
fn malformed_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"schema_version\": 1, ").unwrap();
    let (code, _, err) = run(bin().args(["compile", "-o"]).arg(dir.path().join("out")).arg(&bad));
    assert_eq!(code, 2);
    assert!(err.contains("schema error"), "{err}");
    let (code, _, _) = run(bin().args(["compile", "-o"]).arg(dir.path()).arg(dir.path().join("missing.json")));
    assert_eq!(code, 2);
    let (code, _, _) = run(bin().args(["compile", "--regs", "2", "-o"]).arg(dir.path()).arg(bench("simple_pulse.json")));
    assert_eq!(code, 2);
}

#[test]
fn sim_reports_the_listing_latency() {
    let out = tempfile::tempdir().unwrap();
    let (code, _, _) = run(bin().args(["compile", "-o"]).arg(out.path()).arg(bench("active_feedback.json")));
    assert_eq!(code, 0);
    let trace = out.path().join("trace.jsonl");
    let (code, stdout, err) = run(bin().args(["sim", "run", "--assert-latency-ns", "700", "--trace"]).arg(&trace).arg(out.path()));
    assert_eq!(code, 0, "{err}");
    assert!(stdout.lines().any(|l| l == "max latency 692 ns, PASS"), "{stdout}");
    let lines = fs::read_to_string(&trace).unwrap();
    assert!(lines.lines().count() > 100);
    let (code, stdout, _) = run(bin().args(["sim", "run", "--assert-latency-ns", "600"]).arg(out.path()));
    assert_eq!(code, 3);
    assert!(stdout.contains("max latency 692 ns, FAIL"));
}

#[test]
fn sim_json_report_parses() {
    let (code, stdout, _) = run(bin().args(["sim", "run", "--json", "--counts", "3,7"]).arg(bench("while_threshold.json")));
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v[0]["max_latency_ns"], 696);
    assert_eq!(v[0]["final_vars"]["attempts"], 2);
}

#[test]
fn max_ticks_exits_3() {
    let (code, _, err) = run(bin().args(["sim", "run", "--max-ticks=10"]).arg(bench("nested_loop.json")));
    assert_eq!(code, 3);
    assert!(err.contains("exceeded 10 ticks"), "{err}");
}

#[test]
fn tampered_bundle_is_rejected() {
    let out = tempfile::tempdir().unwrap();
    run(bin().args(["compile", "-o"]).arg(out.path()).arg(bench("simple_pulse.json")));
    fs::write(out.path().join("dds0.bin"), [0u8; 8]).unwrap();
    let (code, _, err) = run(bin().args(["sim", "run"]).arg(out.path()));
    assert_eq!(code, 2);
    assert!(err.contains("manifest hash"), "{err}");
}

#[test]
fn bench_passes_and_prints_both_tables() {
    let (code, stdout, _) = run(bin().arg("bench"));
    assert_eq!(code, 0);
    assert!(stdout.contains("per-stage ms"));
    assert!(stdout.contains("1000x"));
    let (code, stdout, _) = run(bin().args(["bench", "--json", "--suite"]).arg(bench("suite.json")));
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 6);
}

#[test]
fn bench_with_a_wrong_reference_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut suite: Value = serde_json::from_slice(&fs::read(bench("suite.json")).unwrap()).unwrap();
    suite["benchmarks"][0]["st_entries"] = 5.into();
    for b in suite["benchmarks"].as_array().unwrap() {
        let f = b["file"].as_str().unwrap();
        fs::copy(bench(f), dir.path().join(f)).unwrap();
    }
    let path = dir.path().join("suite.json");
    fs::write(&path, suite.to_string()).unwrap();
    let (code, _, err) = run(bin().args(["bench", "--suite"]).arg(&path));
    assert_eq!(code, 3);
    assert!(err.contains("st_entries"), "{err}");
}

#[test]
fn compactness_report_for_files() {
    let (code, stdout, _) = run(bin().args(["report", "compactness"]).arg(bench("nested_loop.json")));
    assert_eq!(code, 0);
    assert!(stdout.contains("1000x"), "{stdout}");
    let (code, stdout, _) = run(bin().args(["report", "compactness", "--json"]));
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v[5]["compactness"]["naive_entries"], Value::Null);
}

#[test]
fn scan_expand_shares_one_control_program() {
    let out = tempfile::tempdir().unwrap();
    let (code, stdout, err) = run(bin().args(["scan", "expand", "-o"]).arg(out.path()).arg(data("gate_scan.json")));
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("10 points"));
    let m = manifest(out.path());
    assert_eq!(m["scan"]["table_dirs"].as_array().unwrap().len(), 10);
    let tables: Vec<String> = (0..10)
        .map(|i| hex::encode(Sha256::digest(fs::read(out.path().join(format!("point{i:03}/dds0.stbl"))).unwrap())))
        .collect();
    let distinct: std::collections::BTreeSet<_> = tables.iter().collect();
    assert_eq!(distinct.len(), 10);
    let (code, stdout, _) = run(bin().args(["sim", "run", "--counts", "3,7"]).arg(out.path()));
    assert_eq!(code, 0);
    assert!(stdout.contains("identical across 10 points"));
    assert_eq!(stdout.matches("max latency 692 ns, PASS").count(), 10);
}

#[test]
fn scan_without_scan_is_an_input_error() {
    let out = tempfile::tempdir().unwrap();
    let (code, _, _) = run(bin().args(["scan", "expand", "-o"]).arg(out.path()).arg(bench("simple_pulse.json")));
    assert_eq!(code, 2);
}
