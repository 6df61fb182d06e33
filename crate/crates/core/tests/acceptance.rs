//! One line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::*;
use ionctl::bench::{builtin_source, run_suite, Suite, CALIBRATION};
use ionctl::decimal::Decimal;
use ionctl::interp::{run_allocated, run_cfg};
use ionctl::pipeline::{compile, compile_json, CompileOptions, Compiled};
use ionctl::program::{ChannelKind, ChannelRef, ScanField, ScanSpec, SeqProgram};
use ionctl::regalloc::{verify_coloring, RegFile};
use ionctl::scan::expand_scan;
use ionctl::sim::*;
use ionctl::ssa::iterated_frontier;

const MAX_TICKS: u64 = 1 << 40;
/// Listing latency window, ns.
const LISTING_NS: (u64, u64) = (688, 692);
const FEEDBACK_NS_MAX: u64 = 700;
const DELAY_NS_MAX: u64 = 100;
const COMPACTNESS_S_MAX: f64 = 1.0;
const ORACLE_PROGRAMS: u64 = 1000;
const ORACLE_S_MAX: u64 = 60;
const MAX_BLOCKS: usize = 64;
const SEMANTIC_PROGRAMS: u64 = 100;
const SCRIPTS: u64 = 100;
const SCAN_POINTS: usize = 10;
const REPEATS: usize = 3;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn benchmark(file: &str) -> Compiled {
    compile_json(builtin_source(file).unwrap().as_bytes(), &CompileOptions::default()).unwrap()
}

fn compactness_exact() -> Outcome {
    let start = Instant::now();
    let suite = Suite::builtin();
    let results = run_suite(&suite, None, &CompileOptions::default())?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut got = Vec::new();
    for (spec, r) in suite.benchmarks.iter().zip(&results) {
        let c = &r.metrics.compactness;
        ensure(c.entries == spec.st_entries, || format!("{}: k {} != {}", spec.name, c.entries, spec.st_entries))?;
        ensure(c.naive_entries == spec.naive, || format!("{}: naive {:?} != {:?}", spec.name, c.naive_entries, spec.naive))?;
        ensure(c.reduction == spec.reduction, || format!("{}: reduction {:?} != {:?}", spec.name, c.reduction, spec.reduction))?;
        got.push(format!("{}/{}", c.entries, c.naive_entries.map_or("inf".into(), |n| n.to_string())));
    }
    ensure(elapsed < COMPACTNESS_S_MAX, || format!("took {elapsed:.3} s"))?;
    Ok(format!("k/naive {} in {:.1} ms", got.join(" "), elapsed * 1e3))
}

fn sanity_bands() -> Outcome {
    let results = run_suite(&Suite::builtin(), None, &CompileOptions::default())?;
    let mut got = Vec::new();
    for r in &results {
        let bad: Vec<String> = r.failures().filter(|c| c.metric != "compile_ms").map(|c| format!("{} {} want {}", c.metric, c.observed, c.expected)).collect();
        ensure(bad.is_empty(), || format!("{}: {}", r.name, bad.join(", ")))?;
        got.push(format!("{}/{}/{}", r.metrics.cfg_blocks, r.metrics.ssa_vars, r.metrics.asm_words));
    }
    Ok(format!("blocks/ssa/instr {}", got.join(" ")))
}

fn compile_time() -> Outcome {
    let suite = Suite::builtin();
    let mut worst: f64 = 0.0;
    for r in run_suite(&suite, None, &CompileOptions::default())? {
        ensure(r.metrics.compile_ms < suite.bands.compile_ms_max, || format!("{}: {:.3} ms", r.name, r.metrics.compile_ms))?;
        worst = worst.max(r.metrics.compile_ms);
    }
    Ok(format!("slowest {worst:.3} ms < {} ms", suite.bands.compile_ms_max))
}

fn feedback_latency() -> Outcome {
    let tm = TimingModel::default();
    tm.validate()?;
    for (what, d) in [("readcnt", tm.readcnt_delay), ("bcast", tm.bcast_delay), ("release", tm.barrier_release)] {
        ensure(d * tm.tick_ns < DELAY_NS_MAX, || format!("{what} delay {} ns", d * tm.tick_ns))?;
    }
    let listing = benchmark(CALIBRATION);
    let t = run_compiled(&listing, &tm, &mut DetectionScript::cycled(vec![3, 7]), MAX_TICKS).map_err(|e| e.to_string())?;
    let recs = measure_feedback_latency(&t).map_err(|e| e.to_string())?;
    for r in &recs {
        ensure((LISTING_NS.0..=LISTING_NS.1).contains(&r.ns), || format!("listing cycle {}: {} ns", r.cycle, r.ns))?;
    }
    let mut worst = Vec::new();
    for spec in Suite::builtin().benchmarks.iter().filter(|b| b.feedback) {
        let c = benchmark(&spec.file);
        let t = run_compiled(&c, &tm, &mut DetectionScript::cycled(vec![3, 7, 1, 9]), MAX_TICKS).map_err(|e| e.to_string())?;
        let ns = measure_feedback_latency(&t).map_err(|e| format!("{}: {e}", spec.name))?.iter().map(|r| r.ns).max().unwrap();
        ensure(ns < FEEDBACK_NS_MAX, || format!("{}: {ns} ns", spec.name))?;
        worst.push(format!("{} {ns}", spec.name));
    }
    Ok(format!("listing {} ns over {} taken cycles; worst ns: {}", recs[0].ns, recs.len(), worst.join(", ")))
}

fn scan_invariance() -> Outcome {
    let mut p: SeqProgram = ionctl::program::parse_program(builtin_source(CALIBRATION).unwrap().as_bytes()).map_err(|e| e.to_string())?;
    let gate = p.states.iter().find(|s| s.name == "Gate").ok_or("no Gate state")?;
    let dds = gate.dds.first().ok_or("Gate drives no DDS channel")?;
    let ch = ChannelRef {
        board_id: dds.board_id.clone(),
        channel_index: dds.channel_index,
        kind: ChannelKind::DdsOut,
    };
    p.scan = Some(ScanSpec {
        state: "Gate".into(),
        field: ScanField::DdsFreq,
        channel: Some(ch),
        points: (0..SCAN_POINTS).map(|i| Decimal::from_int(10_000_000 + 250_000 * i as i64)).collect(),
    });
    let x = expand_scan(&p, &CompileOptions::default()).map_err(|e| e.to_string())?;
    ensure(x.tables.len() == SCAN_POINTS, || format!("{} table sets", x.tables.len()))?;
    let mut control_hashes = BTreeSet::new();
    let mut table_bytes = BTreeSet::new();
    for (i, point) in x.points.iter().enumerate() {
        let variant = p.with_scan_point(point).map_err(|e| e.to_string())?;
        let c = compile(&variant, &CompileOptions::default()).map_err(|e| e.to_string())?;
        let bytes: Vec<u8> = c.boards.iter().flat_map(|b| b.word_bytes()).collect();
        control_hashes.insert(bytes);
        ensure(c.tables == x.tables[i], || format!("point {i}: tables differ from a full compile"))?;
        table_bytes.insert(x.tables[i].boards.iter().flat_map(|b| b.to_bytes()).collect::<Vec<u8>>());
    }
    ensure(control_hashes.len() == 1, || format!("{} distinct control programs", control_hashes.len()))?;
    ensure(table_bytes.len() == SCAN_POINTS, || format!("{} distinct table sets", table_bytes.len()))?;
    Ok(format!("{SCAN_POINTS} table sets, 1 control program"))
}

fn ssa_oracle() -> Outcome {
    let start = Instant::now();
    let mut biggest = 0;
    let mut phis = 0;
    for seed in 0..ORACLE_PROGRAMS {
        let p = random_program(seed);
        let c = compile(&p, &CompileOptions::default()).map_err(|e| format!("seed {seed}: {e}"))?;
        let cfg = &c.ssa.cfg;
        ensure(cfg.len() <= MAX_BLOCKS, || format!("seed {seed}: {} blocks", cfg.len()))?;
        biggest = biggest.max(cfg.len());
        let dom = brute_dominators(cfg);
        for b in 0..cfg.len() {
            for a in 0..cfg.len() {
                if !dom[b].is_empty() && c.ssa.dom.dominates(a, b) != dom[b].contains(&a) {
                    return Err(format!("seed {seed}: dominance of b{b} by b{a}"));
                }
            }
        }
        let df = brute_frontiers(cfg);
        ensure(c.ssa.frontiers == df, || format!("seed {seed}: frontiers"))?;
        let names: BTreeSet<String> = c.cfg.variables().into_iter().map(|v| v.name).collect();
        for name in names {
            let defs: BTreeSet<usize> = c
                .cfg
                .blocks
                .iter()
                .filter(|b| b.insts.iter().any(|i| i.def().is_some_and(|d| d.name == name)))
                .map(|b| b.id)
                .collect();
            let idf = brute_idf(&df, &defs);
            ensure(iterated_frontier(&c.ssa.frontiers, &defs) == idf, || format!("seed {seed}: idf of {name}"))?;
            let placed: BTreeSet<usize> = (0..cfg.len()).filter(|b| c.ssa.phis[*b].iter().any(|p| p.dst.name == name)).collect();
            ensure(placed == idf, || format!("seed {seed}: {name} phis at {placed:?}, oracle {idf:?}"))?;
            phis += placed.len();
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(ORACLE_S_MAX), || format!("took {elapsed:?}"))?;
    Ok(format!("{ORACLE_PROGRAMS} programs, {phis} phis, up to {biggest} blocks, {:.1} s", elapsed.as_secs_f64()))
}

fn allocation_semantics() -> Outcome {
    let mut programs: Vec<(String, SeqProgram)> = (0..SEMANTIC_PROGRAMS).map(|s| (format!("seed {s}"), random_program(s))).collect();
    for k in [4, 6, 9] {
        programs.push((format!("clique {k}"), pressure_program(k)));
    }
    let mut spilled = 0;
    let mut runs = 0;
    for (what, p) in &programs {
        for regs in [4, 8] {
            let opts = CompileOptions {
                regs: RegFile::new(regs).unwrap(),
                ..CompileOptions::default()
            };
            let c = compile(p, &opts).map_err(|e| format!("{what}: {e}"))?;
            verify_coloring(&c.alloc.graph, &c.alloc.assignment).map_err(|e| format!("{what} regs {regs}: {e}"))?;
            if c.alloc.spill_count() > 0 {
                spilled += 1;
            }
            for s in 0..SCRIPTS {
                let base = run_cfg(&c.cfg, None, &mut counts(s), 100_000).map_err(|e| e.to_string())?;
                let alloc = run_allocated(&c.alloc, &mut counts(s), 100_000).map_err(|e| e.to_string())?;
                ensure(base.steps == alloc.steps, || format!("{what} regs {regs} script {s}: steps"))?;
                for (k, v) in &alloc.outputs {
                    ensure(base.outputs.get(k) == Some(v), || format!("{what} regs {regs} script {s}: {k}"))?;
                }
                runs += 1;
            }
        }
    }
    ensure(spilled >= 3, || format!("only {spilled} allocations spilled"))?;
    Ok(format!("{} programs, {runs} scripted runs, {spilled} allocations with spills", programs.len()))
}

fn artifacts(file: &str) -> Result<Vec<u8>, String> {
    let c = benchmark(file);
    let mut out = Vec::new();
    for b in &c.boards {
        out.extend(b.word_bytes());
        out.extend(b.asm_text().into_bytes());
    }
    for t in &c.tables.boards {
        out.extend(t.to_bytes());
    }
    let t = run_compiled(&c, &TimingModel::default(), &mut DetectionScript::cycled(vec![4, 2, 8, 5, 0, 6]), MAX_TICKS).map_err(|e| e.to_string())?;
    out.extend(t.to_jsonl().into_bytes());
    Ok(out)
}

fn determinism() -> Outcome {
    let suite = Suite::builtin();
    for spec in &suite.benchmarks {
        let first = artifacts(&spec.file)?;
        for _ in 1..REPEATS {
            ensure(artifacts(&spec.file)? == first, || format!("{}: artifacts differ", spec.name))?;
        }
    }
    Ok(format!("{} benchmarks x {REPEATS} runs identical", suite.benchmarks.len()))
}

fn lockstep() -> Outcome {
    let suite = Suite::builtin();
    for spec in &suite.benchmarks {
        let c = benchmark(&spec.file);
        let t = run_compiled(&c, &TimingModel::default(), &mut DetectionScript::cycled(vec![3, 7, 1, 9]), MAX_TICKS).map_err(|e| e.to_string())?;
        assert_lockstep(&t).map_err(|e| format!("{}: {e}", spec.name))?;
    }
    let c = benchmark(CALIBRATION);
    let mut boards = SimBoard::from_bundle(&c.boards, &c.tables.boards).map_err(|e| e.to_string())?;
    let entry = c.tables.state_entry[c.program.state_index("Gate").unwrap()].unwrap();
    boards[1].durations[entry as usize] += 1;
    let t = run(&boards, &TimingModel::default(), &mut DetectionScript::cycled(vec![3, 7]), MAX_TICKS).map_err(|e| e.to_string())?;
    let first = t.steps_started(&boards[0].board_id).iter().position(|e| *e == entry).unwrap() as u64;
    match assert_lockstep(&t) {
        Err(LockstepViolation::Skew { ordinal, .. }) if ordinal == first => Ok(format!("all benchmarks in lockstep; fault caught at step {ordinal}")),
        other => Err(format!("fault at step {first} reported as {other:?}")),
    }
}

fn protocol_safety() -> Outcome {
    let suite = Suite::builtin();
    let mut recvs = 0;
    for spec in &suite.benchmarks {
        let c = benchmark(&spec.file);
        let t = run_compiled(&c, &TimingModel::default(), &mut DetectionScript::cycled(vec![3, 7, 1, 9]), MAX_TICKS).map_err(|e| e.to_string())?;
        check_protocol(&t).map_err(|e| format!("{}: {e}", spec.name))?;
        recvs += t.events.iter().filter(|e| matches!(e.kind, EventKind::Recv { .. })).count();
    }
    let c = benchmark(CALIBRATION);
    let mut boards = SimBoard::from_bundle(&c.boards, &c.tables.boards).map_err(|e| e.to_string())?;
    for b in &mut boards {
        b.counter_board = false;
    }
    match run(&boards, &TimingModel::default(), &mut DetectionScript::cycled(vec![3]), MAX_TICKS) {
        Err(SimError::Deadlock { tick, .. }) => Ok(format!("{recvs} receives after their broadcast; silent barrier deadlocks at tick {tick}")),
        other => Err(format!("barrier without broadcast gave {other:?}")),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("compactness exactness", compactness_exact),
        ("compilation sanity bands", sanity_bands),
        ("compile time", compile_time),
        ("feedback latency", feedback_latency),
        ("scan invariance", scan_invariance),
        ("ssa oracle", ssa_oracle),
        ("allocation validity and semantics", allocation_semantics),
        ("determinism", determinism),
        ("lockstep", lockstep),
        ("protocol safety", protocol_safety),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("PASS  {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
