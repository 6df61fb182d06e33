//! The full compiler: node tree to per-board binaries and step tables.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::cfg::{build_cfg_with_tags, detect_dead_code, prune_unreachable};
use crate::codegen::{generate, max_words, BoardProgram};
use crate::ir::{BlockId, Cfg};
use crate::liveness::{analyze, destruct_ssa, Liveness};
use crate::program::{parse_program, Diagnostic, SeqProgram, SourceLoc};
use crate::regalloc::{allocate, Allocation, RegFile};
use crate::ssa::{construct_ssa, SsaError, SsaProgram};
use crate::steptable::{build_step_tables, compactness, Compactness, StepTables, DEFAULT_SYSCLK_HZ};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parse,
    Validate,
    Cfg,
    Ssa,
    OutOfSsa,
    RegAlloc,
    StepTable,
    Codegen,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Parse => "parse",
            Stage::Validate => "validate",
            Stage::Cfg => "cfg",
            Stage::Ssa => "ssa",
            Stage::OutOfSsa => "out-of-ssa",
            Stage::RegAlloc => "regalloc",
            Stage::StepTable => "steptable",
            Stage::Codegen => "codegen",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{stage}: {message}{}", loc.as_ref().map(|l| format!(" (at {l})")).unwrap_or_default())]
pub struct CompileError {
    pub stage: Stage,
    pub message: String,
    pub loc: Option<SourceLoc>,
}

impl CompileError {
    fn new(stage: Stage, e: impl ToString) -> Self {
        CompileError {
            stage,
            message: e.to_string(),
            loc: None,
        }
    }

    /// Input errors are the user's to fix; the rest point at the compiler
    /// or at resource limits.
    pub fn is_input_error(&self) -> bool {
        matches!(self.stage, Stage::Parse | Stage::Validate | Stage::Ssa | Stage::StepTable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompileOptions {
    pub regs: RegFile,
    pub sysclk_hz: u64,
    pub split_critical_edges: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            regs: RegFile::default(),
            sysclk_hz: DEFAULT_SYSCLK_HZ,
            split_critical_edges: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Compiled {
    pub program: SeqProgram,
    pub cfg: Cfg,
    pub dead_blocks: Vec<BlockId>,
    pub ssa: SsaProgram,
    pub lowered: Cfg,
    pub liveness: Liveness,
    pub alloc: Allocation,
    pub tables: StepTables,
    pub boards: Vec<BoardProgram>,
    pub wait_tags: BTreeMap<String, u32>,
    pub warnings: Vec<Diagnostic>,
    pub timings: Vec<(Stage, Duration)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub cfg_blocks: usize,
    pub ssa_vars: usize,
    pub phis: usize,
    pub asm_words: usize,
    pub spills: usize,
    pub max_pressure: usize,
    pub step_entries: usize,
    pub compile_ms: f64,
    pub compactness: Compactness,
}

impl Compiled {
    pub fn total_time(&self) -> Duration {
        self.timings.iter().map(|(_, d)| *d).sum()
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            cfg_blocks: self.cfg.len(),
            ssa_vars: self.ssa.var_count(),
            phis: self.ssa.phi_count(),
            asm_words: max_words(&self.boards),
            spills: self.alloc.spill_count(),
            max_pressure: self.alloc.graph.max_pressure,
            step_entries: self.tables.entry_count,
            compile_ms: self.total_time().as_secs_f64() * 1e3,
            compactness: compactness(&self.program, &self.tables),
        }
    }

    pub fn board(&self, id: &str) -> Option<&BoardProgram> {
        self.boards.iter().find(|b| b.board_id == id)
    }
}

fn timed<T>(timings: &mut Vec<(Stage, Duration)>, stage: Stage, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.push((stage, start.elapsed()));
    out
}

/// Parses a JSON document and compiles it.
pub fn compile_json(bytes: &[u8], opts: &CompileOptions) -> Result<Compiled, CompileError> {
    let start = Instant::now();
    let program = parse_program(bytes).map_err(|e| {
        let loc = match &e {
            crate::program::ProgramError::Validation { loc, .. } => loc.clone(),
            _ => None,
        };
        CompileError {
            stage: Stage::Parse,
            message: e.to_string(),
            loc,
        }
    })?;
    let parse = start.elapsed();
    let mut c = compile(&program, opts)?;
    c.timings.insert(0, (Stage::Parse, parse));
    Ok(c)
}

/// Compiles a validated program.
pub fn compile(program: &SeqProgram, opts: &CompileOptions) -> Result<Compiled, CompileError> {
    let mut timings = Vec::new();
    let checked = timed(&mut timings, Stage::Validate, || program.validate().map(|_| program.validate_variables()));
    let diags = checked.map_err(|e| {
        let loc = match &e {
            crate::program::ProgramError::Validation { loc, .. } => loc.clone(),
            _ => None,
        };
        CompileError {
            stage: Stage::Validate,
            message: e.to_string(),
            loc,
        }
    })?;
    if let Some(d) = diags.first() {
        return Err(CompileError {
            stage: Stage::Validate,
            message: d.message.clone(),
            loc: d.loc.clone(),
        });
    }
    let (raw, wait_tags) = timed(&mut timings, Stage::Cfg, || build_cfg_with_tags(program))
        .map_err(|e| CompileError::new(Stage::Cfg, e))?;
    let dead_blocks = detect_dead_code(&raw);
    let warnings: Vec<Diagnostic> = dead_blocks
        .iter()
        .map(|b| Diagnostic {
            message: format!("block b{b} is unreachable and was removed"),
            loc: raw.blocks[*b].insts.first().and_then(|i| i.loc.clone()),
        })
        .collect();
    let cfg = if dead_blocks.is_empty() { raw } else { prune_unreachable(&raw) };
    let ssa = timed(&mut timings, Stage::Ssa, || construct_ssa(&cfg)).map_err(|e| match e {
        SsaError::UseBeforeDef { ref loc, .. } => CompileError {
            stage: Stage::Ssa,
            message: e.to_string(),
            loc: loc.clone(),
        },
        other => CompileError::new(Stage::Ssa, other),
    })?;
    let (lowered, liveness) = timed(&mut timings, Stage::OutOfSsa, || {
        destruct_ssa(&ssa, opts.split_critical_edges).map(|l| {
            let live = analyze(&l);
            (l, live)
        })
    })
    .map_err(|e| CompileError::new(Stage::OutOfSsa, e))?;
    let alloc = timed(&mut timings, Stage::RegAlloc, || allocate(&lowered, opts.regs))
        .map_err(|e| CompileError::new(Stage::RegAlloc, e))?;
    let tables = timed(&mut timings, Stage::StepTable, || build_step_tables(program, opts.sysclk_hz))
        .map_err(|e| CompileError::new(Stage::StepTable, e))?;
    let boards = timed(&mut timings, Stage::Codegen, || generate(&alloc, &tables, &program.config))
        .map_err(|e| CompileError::new(Stage::Codegen, e))?;
    Ok(Compiled {
        program: program.clone(),
        cfg,
        dead_blocks,
        ssa,
        lowered,
        liveness,
        alloc,
        tables,
        boards,
        wait_tags,
        warnings,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::build::*;
    use crate::program::CmpOp;

    #[test]
    fn errors_carry_stage_and_location() {
        let p = SeqProgram::new(
            two_board_config(),
            vec![state("A", 1)],
            vec![if_(cond(v("x"), CmpOp::LT, c(1)), vec![play("A")], None)],
        );
        let err = compile(&p, &CompileOptions::default()).unwrap_err();
        assert_eq!(err.stage, Stage::Validate);
        assert!(err.loc.is_some());
        assert!(err.is_input_error());
    }

    #[test]
    fn every_stage_is_timed() {
        let p = SeqProgram::new(two_board_config(), vec![state("A", 1)], vec![play("A")]);
        let c = compile(&p, &CompileOptions::default()).unwrap();
        let stages: Vec<Stage> = c.timings.iter().map(|(s, _)| *s).collect();
        assert_eq!(
            stages,
            vec![
                Stage::Validate,
                Stage::Cfg,
                Stage::Ssa,
                Stage::OutOfSsa,
                Stage::RegAlloc,
                Stage::StepTable,
                Stage::Codegen
            ]
        );
        let m = c.metrics();
        assert_eq!(m.cfg_blocks, 2);
        assert_eq!(m.asm_words, 2);
    }
}
