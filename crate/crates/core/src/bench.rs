//! The benchmark suite: six representative programs with reference
//! compilation characteristics and table-size expectations.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pipeline::{compile_json, CompileError, CompileOptions, Metrics, Stage};

pub const SUITE_JSON: &str = include_str!("../benchmarks/suite.json");

const FILES: [(&str, &str); 6] = [
    ("simple_pulse.json", include_str!("../benchmarks/simple_pulse.json")),
    ("variable_readout.json", include_str!("../benchmarks/variable_readout.json")),
    ("active_feedback.json", include_str!("../benchmarks/active_feedback.json")),
    ("nested_loop.json", include_str!("../benchmarks/nested_loop.json")),
    ("multi_var_feedback.json", include_str!("../benchmarks/multi_var_feedback.json")),
    ("while_threshold.json", include_str!("../benchmarks/while_threshold.json")),
];

/// The feedback program used for latency calibration.
pub const CALIBRATION: &str = "active_feedback.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub cfg_blocks_abs: usize,
    pub ssa_vars_abs: usize,
    pub asm_words_rel: f64,
    pub compile_ms_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub file: String,
    pub cfg_blocks: usize,
    pub ssa_vars: usize,
    pub asm_words: usize,
    pub st_entries: usize,
    pub iterations: Option<u64>,
    pub naive: Option<u64>,
    pub reduction: Option<u64>,
    /// Contains a conditional that depends on a photon count.
    pub feedback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub bands: Bands,
    pub benchmarks: Vec<BenchmarkSpec>,
}

impl Suite {
    pub fn builtin() -> Suite {
        serde_json::from_str(SUITE_JSON).expect("embedded suite parses")
    }

    pub fn load(path: &Path) -> Result<Suite, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn get(&self, name: &str) -> Option<&BenchmarkSpec> {
        self.benchmarks.iter().find(|b| b.name == name || b.file == name)
    }
}

/// Source of an embedded benchmark program by file name.
pub fn builtin_source(file: &str) -> Option<&'static str> {
    FILES.iter().find(|(f, _)| *f == file).map(|(_, s)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub metric: String,
    pub expected: String,
    pub observed: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub name: String,
    pub metrics: Metrics,
    pub stage_ms: Vec<(Stage, f64)>,
    pub checks: Vec<Check>,
}

impl BenchResult {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

fn check(metric: &str, expected: String, observed: String, pass: bool) -> Check {
    Check {
        metric: metric.into(),
        expected,
        observed,
        pass,
    }
}

fn opt(v: Option<u64>) -> String {
    v.map_or("---".into(), |x| x.to_string())
}

/// Compiles one benchmark and checks it against its reference values.
pub fn run_benchmark(spec: &BenchmarkSpec, bands: &Bands, source: &[u8], opts: &CompileOptions) -> Result<BenchResult, CompileError> {
    let compiled = compile_json(source, opts)?;
    let m = compiled.metrics();
    let within = |obs: usize, exp: usize, tol: usize| obs + tol >= exp && obs <= exp + tol;
    let lo = (spec.asm_words as f64 * (1.0 - bands.asm_words_rel)).ceil() as usize;
    let hi = (spec.asm_words as f64 * (1.0 + bands.asm_words_rel)).floor() as usize;
    let checks = vec![
        check(
            "cfg_blocks",
            format!("{}±{}", spec.cfg_blocks, bands.cfg_blocks_abs),
            m.cfg_blocks.to_string(),
            within(m.cfg_blocks, spec.cfg_blocks, bands.cfg_blocks_abs),
        ),
        check(
            "ssa_vars",
            format!("{}±{}", spec.ssa_vars, bands.ssa_vars_abs),
            m.ssa_vars.to_string(),
            within(m.ssa_vars, spec.ssa_vars, bands.ssa_vars_abs),
        ),
        check(
            "asm_words",
            format!("{lo}..={hi}"),
            m.asm_words.to_string(),
            (lo..=hi).contains(&m.asm_words),
        ),
        check(
            "st_entries",
            spec.st_entries.to_string(),
            m.step_entries.to_string(),
            m.step_entries == spec.st_entries,
        ),
        check(
            "iterations",
            opt(spec.iterations),
            opt(m.compactness.iterations),
            m.compactness.iterations == spec.iterations,
        ),
        check(
            "naive",
            opt(spec.naive),
            opt(m.compactness.naive_entries),
            m.compactness.naive_entries == spec.naive,
        ),
        check(
            "reduction",
            opt(spec.reduction),
            opt(m.compactness.reduction),
            m.compactness.reduction == spec.reduction,
        ),
        check(
            "compile_ms",
            format!("<{}", bands.compile_ms_max),
            format!("{:.3}", m.compile_ms),
            m.compile_ms < bands.compile_ms_max,
        ),
    ];
    Ok(BenchResult {
        name: spec.name.clone(),
        stage_ms: compiled.timings.iter().map(|(s, d)| (*s, d.as_secs_f64() * 1e3)).collect(),
        metrics: m,
        checks,
    })
}

/// Runs every benchmark of the suite; sources come from `dir` or, if
/// `None`, from the copies embedded in the library.
pub fn run_suite(suite: &Suite, dir: Option<&Path>, opts: &CompileOptions) -> Result<Vec<BenchResult>, String> {
    suite
        .benchmarks
        .iter()
        .map(|spec| {
            let source = match dir {
                Some(d) => std::fs::read(d.join(&spec.file)).map_err(|e| format!("{}: {e}", spec.file))?,
                None => builtin_source(&spec.file)
                    .ok_or_else(|| format!("no embedded benchmark {}", spec.file))?
                    .as_bytes()
                    .to_vec(),
            };
            run_benchmark(spec, &suite.bands, &source, opts).map_err(|e| format!("{}: {e}", spec.name))
        })
        .collect()
}

/// Table of compilation characteristics with per-stage times.
pub fn characteristics_table(results: &[BenchResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:>4} {:>4} {:>5} {:>4} {:>6} {:>9}  {}",
        "program", "BBs", "SSA", "instr", "ST", "spills", "total ms", "verdict"
    );
    for r in results {
        let m = &r.metrics;
        let verdict = if r.pass() {
            "ok".to_string()
        } else {
            let bad: Vec<String> = r
                .failures()
                .map(|c| format!("{} {} (want {})", c.metric, c.observed, c.expected))
                .collect();
            format!("FAIL: {}", bad.join("; "))
        };
        let _ = writeln!(
            out,
            "{:<22} {:>4} {:>4} {:>5} {:>4} {:>6} {:>9.3}  {}",
            r.name, m.cfg_blocks, m.ssa_vars, m.asm_words, m.step_entries, m.spills, m.compile_ms, verdict
        );
    }
    let _ = writeln!(out, "\nper-stage ms:");
    for r in results {
        let stages: Vec<String> = r.stage_ms.iter().map(|(s, ms)| format!("{s} {ms:.3}")).collect();
        let _ = writeln!(out, "  {:<22} {}", r.name, stages.join(", "));
    }
    out
}

/// Table of step-table sizes against naive per-iteration inlining.
pub fn compactness_table(results: &[BenchResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<22} {:>10} {:>4} {:>8} {:>9}", "program", "iterations", "k", "naive", "reduction");
    for r in results {
        let c = &r.metrics.compactness;
        let _ = writeln!(
            out,
            "{:<22} {:>10} {:>4} {:>8} {:>9}",
            r.name,
            opt(c.iterations),
            c.entries,
            opt(c.naive_entries),
            c.reduction.map_or("---".into(), |x| format!("{x}x"))
        );
    }
    out
}
