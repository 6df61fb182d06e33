mod bundle;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ionctl::bench::{characteristics_table, compactness_table, run_suite, Suite};
use ionctl::pipeline::{compile_json, CompileError, CompileOptions, Compiled};
use ionctl::program::parse_program;
use ionctl::regalloc::RegFile;
use ionctl::scan::{expand_scan, ScanError};
use ionctl::sim::{self, DetectionScript, SimBoard, SimError, SimTrace, TimingModel};
use serde::Serialize;
use serde_json::json;

use crate::bundle::{Writer, STAGES};

#[derive(Parser)]
#[command(name = "ionctl", version, about = "Compile, inspect and simulate multi-board ion-trap control programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a program into a bundle of binaries, step tables and stage dumps.
    Compile(CompileArgs),
    /// Compile the benchmark suite and check it against its reference values.
    Bench(BenchArgs),
    /// Run programs on the lockstep simulator.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Reports over compiled programs.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Parameter scans.
    #[command(subcommand)]
    Scan(ScanCmd),
}

#[derive(Subcommand)]
enum SimCmd {
    /// Simulate a bundle directory or a program file.
    Run(SimArgs),
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Step-table size against naive per-iteration inlining.
    Compactness(CompactnessArgs),
}

#[derive(Subcommand)]
enum ScanCmd {
    /// Compile the control program once and a step table set per scan point.
    Expand(ScanArgs),
}

#[derive(Args, Clone)]
struct CompilerFlags {
    /// Registers per board, including x0 and the scratch register.
    #[arg(long, default_value_t = RegFile::default().total)]
    regs: u8,
    /// DDS system clock in Hz.
    #[arg(long, default_value_t = ionctl::steptable::DEFAULT_SYSCLK_HZ)]
    sysclk_hz: u64,
    /// Refuse critical edges instead of splitting them.
    #[arg(long)]
    no_split: bool,
}

impl CompilerFlags {
    fn options(&self) -> Result<CompileOptions, Failure> {
        let regs = RegFile::new(self.regs)
            .ok_or_else(|| Failure::Input(anyhow!("--regs must be between {} and {}", RegFile::MIN, RegFile::MAX)))?;
        Ok(CompileOptions {
            regs,
            sysclk_hz: self.sysclk_hz,
            split_critical_edges: !self.no_split,
        })
    }
}

#[derive(Args)]
struct CompileArgs {
    input: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Stage dumps to write: comma-separated from tree, cfg, ssa, liveness, igraph, alloc, asm, or `all`.
    #[arg(long, value_delimiter = ',')]
    emit: Vec<String>,
    #[command(flatten)]
    flags: CompilerFlags,
}

#[derive(Args)]
struct BenchArgs {
    /// Suite manifest; benchmark files are looked up next to it.
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Print machine-readable JSON
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    flags: CompilerFlags,
}

#[derive(Args)]
struct SimArgs {
    /// Bundle directory or program JSON.
    input: PathBuf,
    /// Timing model JSON; missing fields keep their defaults.
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Photon counts, comma-separated, repeated as needed.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    counts: Vec<i32>,
    /// Seed for Poisson-distributed counts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mean of the Poisson counts.
    #[arg(long, default_value_t = 4.0)]
    mean: f64,
    #[arg(long, default_value_t = 1 << 40)]
    max_ticks: u64,
    /// Fail unless every measured feedback latency is at most this.
    #[arg(long)]
    assert_latency_ns: Option<u64>,
    /// Write the event trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print machine-readable JSON
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    flags: CompilerFlags,
}

#[derive(Args)]
struct CompactnessArgs {
    /// Programs to report on; the built-in suite when empty.
    inputs: Vec<PathBuf>,
    /// Print machine-readable JSON
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    flags: CompilerFlags,
}

#[derive(Args)]
struct ScanArgs {
    input: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    flags: CompilerFlags,
}

#[derive(Debug)]
enum Failure {
    Internal(anyhow::Error),
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(e.into())
    }
}

impl From<CompileError> for Failure {
    fn from(e: CompileError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.into())
        } else {
            Failure::Internal(e.into())
        }
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Input(anyhow!("{}: {e}", path.display())))
}

fn compile_file(path: &Path, opts: &CompileOptions) -> Result<(Vec<u8>, Compiled), Failure> {
    let source = read_input(path)?;
    let c = compile_json(&source, opts)?;
    for w in &c.warnings {
        eprintln!("warning: {}", w.message);
    }
    Ok((source, c))
}

fn cmd_compile(a: &CompileArgs) -> Result<(), Failure> {
    let opts = a.flags.options()?;
    let mut stages: Vec<&str> = Vec::new();
    for e in &a.emit {
        match e.as_str() {
            "all" => stages.extend(STAGES),
            s if STAGES.contains(&s) => stages.push(s),
            other => return Err(Failure::Input(anyhow!("unknown --emit stage {other:?}"))),
        }
    }
    stages.sort_by_key(|s| STAGES.iter().position(|x| x == s));
    stages.dedup();
    let (source, c) = compile_file(&a.input, &opts)?;
    let metrics = c.metrics();
    let mut w = Writer::new(&a.out)?;
    for stage in &stages {
        let (file, text) = bundle::stage_dump(&c, stage);
        w.put(stage, &file, text.as_bytes())?;
    }
    bundle::write_control(&mut w, &c.boards)?;
    bundle::write_tables(&mut w, &c.tables, "")?;
    bundle::write_images(&mut w, &c.boards)?;
    let m = bundle::manifest(&a.input, &source, &opts, &c, &metrics)?;
    let m = w.finish(m)?;
    println!(
        "{}: {} blocks, {} ssa values, {} instructions, {} step entries, {} spills in {:.3} ms",
        a.input.display(),
        metrics.cfg_blocks,
        metrics.ssa_vars,
        metrics.asm_words,
        metrics.step_entries,
        metrics.spills,
        m.total_ms
    );
    for art in &m.artifacts {
        println!("  {:<10} {:<16} {}", art.kind, art.path, &art.sha256[..16]);
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Failure> {
    let opts = a.flags.options()?;
    let (suite, dir) = match &a.suite {
        Some(p) => (
            Suite::load(p).map_err(|e| Failure::Input(anyhow!(e)))?,
            Some(p.parent().unwrap_or(Path::new(".")).to_path_buf()),
        ),
        None => (Suite::builtin(), None),
    };
    let results = run_suite(&suite, dir.as_deref(), &opts).map_err(|e| Failure::Input(anyhow!(e)))?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        print!("{}\n{}", characteristics_table(&results), compactness_table(&results));
    }
    let failed: Vec<String> = results
        .iter()
        .flat_map(|r| r.failures().map(move |c| format!("{}: {} {} outside {}", r.name, c.metric, c.observed, c.expected)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("band violations:\n  {}", failed.join("\n  "))))
    }
}

#[derive(Serialize)]
struct SimReport {
    point: Option<String>,
    end_tick: u64,
    end_ns: u64,
    reads: usize,
    latencies: Vec<sim::LatencyRecord>,
    max_latency_ns: Option<u64>,
    lockstep: Result<(), String>,
    protocol: Result<(), String>,
    final_vars: std::collections::BTreeMap<String, i32>,
    boards_agree: bool,
    pass: bool,
}

fn report(trace: &SimTrace, point: Option<String>, assert_ns: Option<u64>) -> SimReport {
    let latencies = sim::measure_feedback_latency(trace).unwrap_or_default();
    let max = latencies.iter().map(|r| r.ns).max();
    let lockstep = sim::assert_lockstep(trace).map_err(|e| e.to_string());
    let protocol = sim::check_protocol(trace);
    let latency_ok = match assert_ns {
        Some(limit) => max.is_some_and(|m| m <= limit),
        None => true,
    };
    SimReport {
        point,
        end_tick: trace.end_tick,
        end_ns: trace.end_tick * trace.tick_ns,
        reads: trace.reads.len(),
        max_latency_ns: max,
        pass: lockstep.is_ok() && protocol.is_ok() && trace.boards_agree() && latency_ok,
        latencies,
        lockstep,
        protocol,
        final_vars: trace.vars(),
        boards_agree: trace.boards_agree(),
    }
}

fn print_report(r: &SimReport) {
    if let Some(p) = &r.point {
        println!("scan point {p}");
    }
    println!("end tick {} ({} ns), {} read cycles, {} feedback responses", r.end_tick, r.end_ns, r.reads, r.latencies.len());
    for l in &r.latencies {
        println!(
            "  cycle {:>4}: count {:>3}, window closed at tick {}, response at tick {}, {} ns",
            l.cycle, l.count, l.window_close_tick, l.response_start_tick, l.ns
        );
    }
    let verdict = |r: &Result<(), String>| match r {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("FAIL ({e})"),
    };
    println!("lockstep {}, protocol {}", verdict(&r.lockstep), verdict(&r.protocol));
    if !r.final_vars.is_empty() {
        let vars: Vec<String> = r.final_vars.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("final {}{}", vars.join(" "), if r.boards_agree { "" } else { " (boards disagree)" });
    }
    let pass = if r.pass { "PASS" } else { "FAIL" };
    match r.max_latency_ns {
        Some(ns) => println!("max latency {ns} ns, {pass}"),
        None => println!("max latency n/a (no feedback branch taken), {pass}"),
    }
}

fn detection(a: &SimArgs) -> Result<DetectionScript, Failure> {
    if a.counts.is_empty() {
        DetectionScript::poisson(a.seed, a.mean).map_err(|e| Failure::Input(anyhow!(e)))
    } else {
        Ok(DetectionScript::cycled(a.counts.clone()))
    }
}

fn simulate(a: &SimArgs, boards: &[SimBoard], tm: &TimingModel) -> Result<SimTrace, Failure> {
    let mut ds = detection(a)?;
    sim::run(boards, tm, &mut ds, a.max_ticks).map_err(|e| match e {
        SimError::Timing(_) | SimError::Setup(_) => Failure::Input(e.into()),
        e => Failure::Runtime(e.into()),
    })
}

fn cmd_sim(a: &SimArgs) -> Result<(), Failure> {
    let tm = match &a.timing {
        Some(p) => {
            let text = read_input(p)?;
            serde_json::from_slice(&text).map_err(|e| Failure::Input(anyhow!("{}: {e}", p.display())))?
        }
        None => TimingModel::default(),
    };
    tm.validate().map_err(|e| Failure::Input(anyhow!(e)))?;
    let mut runs: Vec<(Option<String>, Vec<SimBoard>)> = Vec::new();
    if a.input.is_dir() {
        let loaded = bundle::load(&a.input).map_err(Failure::Input)?;
        match &loaded.manifest.scan {
            Some(scan) => {
                for (point, dir) in scan.points.iter().zip(&scan.table_dirs) {
                    runs.push((Some(point.clone()), loaded.sim_boards(dir).map_err(Failure::Input)?));
                }
            }
            None => runs.push((None, loaded.sim_boards("").map_err(Failure::Input)?)),
        }
    } else {
        let opts = a.flags.options()?;
        let source = read_input(&a.input)?;
        let program = parse_program(&source).map_err(|e| Failure::Input(e.into()))?;
        if program.scan.is_some() {
            let x = expand_scan(&program, &opts).map_err(scan_failure)?;
            for (point, tables) in x.points.iter().zip(&x.tables) {
                let boards = SimBoard::from_bundle(x.control(), &tables.boards).map_err(|e| Failure::Internal(e.into()))?;
                runs.push((Some(point.to_string()), boards));
            }
        } else {
            let (_, c) = compile_file(&a.input, &opts)?;
            runs.push((None, SimBoard::from_bundle(&c.boards, &c.tables.boards).map_err(|e| Failure::Internal(e.into()))?));
        }
    }
    if runs.len() > 1 {
        let first = bundle::sha256(&runs[0].1.iter().flat_map(|b| b.words.iter().flat_map(|w| w.to_le_bytes())).collect::<Vec<u8>>());
        for (p, boards) in &runs[1..] {
            let h = bundle::sha256(&boards.iter().flat_map(|b| b.words.iter().flat_map(|w| w.to_le_bytes())).collect::<Vec<u8>>());
            if h != first {
                return Err(Failure::Runtime(anyhow!("control program differs at scan point {}", p.as_deref().unwrap_or("?"))));
            }
        }
        if !a.json {
            println!("control program {} identical across {} points", &first[..16], runs.len());
        }
    }
    let mut reports = Vec::new();
    for (i, (point, boards)) in runs.iter().enumerate() {
        let trace = simulate(a, boards, &tm)?;
        if let Some(path) = &a.trace {
            let path = if runs.len() > 1 { indexed(path, i) } else { path.clone() };
            fs::write(&path, trace.to_jsonl()).with_context(|| path.display().to_string())?;
        }
        let r = report(&trace, point.clone(), a.assert_latency_ns);
        if !a.json {
            print_report(&r);
        }
        reports.push(r);
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    }
    if reports.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("simulation checks failed")))
    }
}

fn indexed(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}.{i:03}{ext}"))
}

fn scan_failure(e: ScanError) -> Failure {
    match e {
        ScanError::Point { ref source, .. } if !source.is_input_error() => Failure::Internal(e.into()),
        ScanError::ControlChanged { .. } => Failure::Runtime(e.into()),
        e => Failure::Input(e.into()),
    }
}

fn cmd_compactness(a: &CompactnessArgs) -> Result<(), Failure> {
    let opts = a.flags.options()?;
    if a.inputs.is_empty() {
        let results = run_suite(&Suite::builtin(), None, &opts).map_err(|e| Failure::Internal(anyhow!(e)))?;
        if a.json {
            let rows: Vec<_> = results.iter().map(|r| json!({"program": r.name, "compactness": r.metrics.compactness})).collect();
            println!("{}", serde_json::to_string_pretty(&rows)?);
        } else {
            print!("{}", compactness_table(&results));
        }
        return Ok(());
    }
    let mut rows = Vec::new();
    for input in &a.inputs {
        let (_, c) = compile_file(input, &opts)?;
        rows.push((input.display().to_string(), c.metrics().compactness));
    }
    if a.json {
        let rows: Vec<_> = rows.iter().map(|(p, c)| json!({"program": p, "compactness": c})).collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        let opt = |v: Option<u64>| v.map_or("---".to_string(), |x| x.to_string());
        println!("{:<30} {:>10} {:>4} {:>8} {:>9}", "program", "iterations", "k", "naive", "reduction");
        for (p, c) in rows {
            println!(
                "{:<30} {:>10} {:>4} {:>8} {:>9}",
                p,
                opt(c.iterations),
                c.entries,
                opt(c.naive_entries),
                c.reduction.map_or("---".into(), |x| format!("{x}x"))
            );
        }
    }
    Ok(())
}

fn cmd_scan(a: &ScanArgs) -> Result<(), Failure> {
    let opts = a.flags.options()?;
    let source = read_input(&a.input)?;
    let program = parse_program(&source).map_err(|e| Failure::Input(e.into()))?;
    let spec = program.scan.clone().ok_or_else(|| Failure::Input(anyhow!("{} has no scan", a.input.display())))?;
    let x = expand_scan(&program, &opts).map_err(scan_failure)?;
    let mut w = Writer::new(&a.out)?;
    bundle::write_control(&mut w, x.control())?;
    bundle::write_images(&mut w, x.control())?;
    let mut dirs = Vec::new();
    for (i, t) in x.tables.iter().enumerate() {
        let dir = format!("point{i:03}");
        bundle::write_tables(&mut w, t, &dir)?;
        dirs.push(dir);
    }
    let control: Vec<u8> = x.control().iter().flat_map(|b| b.word_bytes()).collect();
    let control_sha256 = bundle::sha256(&control);
    let metrics = x.base.metrics();
    let mut m = bundle::manifest(&a.input, &source, &opts, &x.base, &metrics)?;
    m.scan = Some(bundle::ScanInfo {
        state: spec.state.clone(),
        field: serde_json::to_value(spec.field)?.as_str().unwrap_or_default().to_string(),
        points: x.points.iter().map(|p| p.to_string()).collect(),
        table_dirs: dirs,
        control_sha256: control_sha256.clone(),
    });
    w.finish(m)?;
    println!(
        "{}: {} points of {} {}, control program {} ({} words) shared by all points",
        a.input.display(),
        x.points.len(),
        spec.state,
        serde_json::to_value(spec.field)?.as_str().unwrap_or_default(),
        &control_sha256[..16],
        control.len() / 4
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Compile(a) => cmd_compile(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Sim(SimCmd::Run(a)) => cmd_sim(a),
        Cmd::Report(ReportCmd::Compactness(a)) => cmd_compactness(a),
        Cmd::Scan(ScanCmd::Expand(a)) => cmd_scan(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Internal(e) | Failure::Input(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
