//! Per-board code generation from an allocated program.
//!
//! Every board runs the same control skeleton. The only difference is the
//! read of a photon count: the counter board latches and broadcasts the
//! value, all other boards receive it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::ir::{BinOp, BlockId, Cond, InstKind, Operand, Rvalue, Terminator, Var};
use crate::isa::{fits_imm12, Instr, IsaError};
use crate::program::{BoardKind, CmpOp, SourceLoc, SystemConfig};
use crate::regalloc::{Allocation, Location, Reg, RegFile};
use crate::steptable::StepTables;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodegenError {
    #[error("program reads photon counts but no board owns the counters")]
    NoCounterBoard,
    #[error("branch from {from} to {to} is out of range")]
    BranchRange { from: usize, to: String },
    #[error("constant pool and spill frame exceed the addressable data memory")]
    DataMemory,
    #[error("state {0} is played but has no step-table entry")]
    MissingEntry(usize),
    #[error("more than one constant operand in {0}")]
    Operands(String),
    #[error(transparent)]
    Encode(#[from] IsaError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AsmLine {
    pub label: Option<String>,
    pub instr: String,
    /// Branch or jump target label.
    pub target: Option<String>,
    pub loc: Option<SourceLoc>,
    /// First step played after a feedback decision.
    pub feedback: bool,
    pub block: BlockId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BoardProgram {
    pub board_id: String,
    pub kind: BoardKind,
    pub counter_board: bool,
    pub lines: Vec<AsmLine>,
    pub words: Vec<u32>,
    /// Data memory image: spill slots (zeroed) followed by the constant pool.
    pub data: Vec<i32>,
    pub frame_slots: u32,
    pub exit_map: BTreeMap<String, Location>,
    pub regs: u8,
}

impl BoardProgram {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn feedback_pcs(&self) -> Vec<usize> {
        self.lines.iter().enumerate().filter(|(_, l)| l.feedback).map(|(i, _)| i).collect()
    }

    pub fn asm_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "; board {} ({:?}{})",
            self.board_id,
            self.kind,
            if self.counter_board { ", counters" } else { "" }
        );
        for (i, line) in self.lines.iter().enumerate() {
            if let Some(l) = &line.label {
                let _ = writeln!(out, "{l}:");
            }
            let mut text = line.instr.clone();
            if let Some(t) = &line.target {
                let _ = write!(text, " <{t}>");
            }
            let mut comment = Vec::new();
            if line.feedback {
                comment.push("feedback".to_string());
            }
            if let Some(loc) = &line.loc {
                comment.push(loc.to_string());
            }
            if comment.is_empty() {
                let _ = writeln!(out, "  {i:4}  {text}");
            } else {
                let _ = writeln!(out, "  {i:4}  {text:<32} ; {}", comment.join(" "));
            }
        }
        out
    }

    pub fn word_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }
}

struct Pending {
    label: Option<String>,
    instr: Instr,
    target: Option<String>,
    loc: Option<SourceLoc>,
    feedback: bool,
    block: BlockId,
}

struct Emitter<'a> {
    alloc: &'a Allocation,
    regs: RegFile,
    pool: Vec<i32>,
    frame_slots: u32,
    out: Vec<Pending>,
    label: Option<String>,
    block: BlockId,
}

impl Emitter<'_> {
    fn emit(&mut self, instr: Instr, loc: Option<&SourceLoc>) {
        self.emit_full(instr, None, loc, false);
    }

    fn emit_full(&mut self, instr: Instr, target: Option<String>, loc: Option<&SourceLoc>, feedback: bool) {
        self.out.push(Pending {
            label: self.label.take(),
            instr,
            target,
            loc: loc.cloned(),
            feedback,
            block: self.block,
        });
    }

    fn reg(&self, v: &Var) -> Reg {
        self.alloc.assignment[v]
    }

    fn pool_addr(&mut self, c: i32) -> Result<i32, CodegenError> {
        let idx = match self.pool.iter().position(|x| *x == c) {
            Some(i) => i,
            None => {
                self.pool.push(c);
                self.pool.len() - 1
            }
        };
        let addr = (self.frame_slots as usize + idx) * 4;
        if addr > 2047 {
            return Err(CodegenError::DataMemory);
        }
        Ok(addr as i32)
    }

    fn load_const(&mut self, rd: Reg, c: i32, loc: Option<&SourceLoc>) -> Result<(), CodegenError> {
        if fits_imm12(c) {
            self.emit(Instr::Addi { rd, rs1: RegFile::ZERO, imm: c }, loc);
        } else {
            let imm = self.pool_addr(c)?;
            self.emit(Instr::Lw { rd, rs1: RegFile::ZERO, imm }, loc);
        }
        Ok(())
    }

    /// Register holding an operand; constants other than zero go through
    /// the scratch register, so at most one may be non-zero.
    fn operands(&mut self, ops: &[&Operand], loc: Option<&SourceLoc>, what: &str) -> Result<Vec<Reg>, CodegenError> {
        let mut scratch_used = false;
        let mut regs = Vec::new();
        for op in ops {
            regs.push(match op {
                Operand::Var(v) => self.reg(v),
                Operand::Const(0) => RegFile::ZERO,
                Operand::Const(c) => {
                    if scratch_used {
                        return Err(CodegenError::Operands(what.to_string()));
                    }
                    scratch_used = true;
                    let s = self.regs.scratch();
                    self.load_const(s, *c, loc)?;
                    s
                }
            });
        }
        Ok(regs)
    }
}

fn block_label(b: BlockId) -> String {
    format!("b{b}")
}

/// Generates one program per configured board.
pub fn generate(
    alloc: &Allocation,
    tables: &StepTables,
    config: &SystemConfig,
) -> Result<Vec<BoardProgram>, CodegenError> {
    let reads_counts = alloc
        .cfg
        .blocks
        .iter()
        .flat_map(|b| &b.insts)
        .any(|i| matches!(i.kind, InstKind::ReadCounter { .. }));
    let counter = config.counter_board().map(|b| b.board_id.clone());
    if reads_counts && counter.is_none() {
        return Err(CodegenError::NoCounterBoard);
    }
    config
        .boards
        .iter()
        .map(|b| {
            let is_counter = counter.as_deref() == Some(b.board_id.as_str());
            let mut p = generate_board(alloc, tables, is_counter)?;
            p.board_id = b.board_id.clone();
            p.kind = b.kind;
            Ok(p)
        })
        .collect()
}

fn generate_board(alloc: &Allocation, tables: &StepTables, is_counter: bool) -> Result<BoardProgram, CodegenError> {
    let cfg = &alloc.cfg;
    let mut e = Emitter {
        alloc,
        regs: alloc.regs,
        pool: Vec::new(),
        frame_slots: alloc.frame_slots,
        out: Vec::new(),
        label: None,
        block: 0,
    };
    for (pos, b) in cfg.blocks.iter().enumerate() {
        e.label = Some(block_label(b.id));
        e.block = b.id;
        let mut first_step = b.cond_entry;
        for inst in &b.insts {
            let loc = inst.loc.as_ref();
            match &inst.kind {
                InstKind::PlayStep { state } => {
                    let index = tables.state_entry[*state].ok_or(CodegenError::MissingEntry(*state))?;
                    e.emit_full(Instr::Step { index }, None, loc, first_step);
                    first_step = false;
                }
                InstKind::Assign { dst, value } => {
                    let rd = e.reg(dst);
                    match value {
                        Rvalue::Use(Operand::Var(src)) => {
                            let rs = e.reg(src);
                            if rs != rd {
                                e.emit(Instr::Addi { rd, rs1: rs, imm: 0 }, loc);
                            }
                        }
                        Rvalue::Use(Operand::Const(c)) => e.load_const(rd, *c, loc)?,
                        Rvalue::Binary(op, a, b) => emit_binary(&mut e, rd, *op, a, b, loc, &inst.to_string())?,
                    }
                }
                InstKind::Barrier { .. } => e.emit(Instr::Barrier, loc),
                InstKind::ReadCounter { dst, counter, .. } => {
                    let rd = e.reg(dst);
                    if is_counter {
                        e.emit(Instr::ReadCnt { rd, counter: counter.channel_index }, loc);
                        e.emit(Instr::Bcast { rs1: rd }, loc);
                    } else {
                        e.emit(Instr::Recv { rd }, loc);
                    }
                }
                InstKind::WaitHost { tag } => e.emit(Instr::WaitHost { tag: *tag }, loc),
                InstKind::Load { dst, slot } => {
                    let rd = e.reg(dst);
                    e.emit(Instr::Lw { rd, rs1: RegFile::ZERO, imm: *slot as i32 * 4 }, loc);
                }
                InstKind::Store { src, slot } => {
                    let rs2 = e.reg(src);
                    e.emit(Instr::Sw { rs2, rs1: RegFile::ZERO, imm: *slot as i32 * 4 }, loc);
                }
            }
        }
        let next = cfg.blocks.get(pos + 1).map(|n| n.id);
        let loc = b.term_loc.as_ref();
        match &b.term {
            Terminator::Halt { .. } => e.emit(Instr::Halt, loc),
            Terminator::Jump(t) => {
                if Some(*t) != next {
                    e.emit_full(Instr::Jal { rd: RegFile::ZERO, off: 0 }, Some(block_label(*t)), loc, false);
                }
            }
            Terminator::Branch { cond, then, else_ } => {
                if Some(*then) == next {
                    let inv = Cond {
                        lhs: cond.lhs.clone(),
                        op: cond.op.negate(),
                        rhs: cond.rhs.clone(),
                    };
                    emit_branch(&mut e, &inv, *else_, loc)?;
                } else {
                    emit_branch(&mut e, cond, *then, loc)?;
                    if Some(*else_) != next {
                        e.emit_full(Instr::Jal { rd: RegFile::ZERO, off: 0 }, Some(block_label(*else_)), loc, false);
                    }
                }
            }
        }
    }
    // a label on an empty trailing block cannot happen: the last block halts
    let mut label_pos: BTreeMap<String, usize> = BTreeMap::new();
    for (i, p) in e.out.iter().enumerate() {
        if let Some(l) = &p.label {
            label_pos.insert(l.clone(), i);
        }
    }
    // blocks that emitted nothing share the position of the next instruction
    for b in cfg.blocks.iter().rev() {
        let l = block_label(b.id);
        if !label_pos.contains_key(&l) {
            let after = cfg.blocks.iter().position(|x| x.id == b.id).unwrap() + 1;
            let pos = cfg.blocks[after..]
                .iter()
                .find_map(|x| label_pos.get(&block_label(x.id)).copied())
                .unwrap_or(e.out.len());
            label_pos.insert(l, pos);
        }
    }
    let mut lines = Vec::with_capacity(e.out.len());
    let mut words = Vec::with_capacity(e.out.len());
    for (i, p) in e.out.into_iter().enumerate() {
        let instr = match &p.target {
            Some(t) => {
                let to = label_pos[t] as i64;
                let off = to - i as i64;
                let ins = p.instr.with_offset(off as i32);
                ins.encode().map_err(|_| CodegenError::BranchRange { from: i, to: t.clone() })?;
                ins
            }
            None => p.instr,
        };
        words.push(instr.encode()?);
        lines.push(AsmLine {
            label: p.label,
            instr: instr.to_string(),
            target: p.target,
            loc: p.loc,
            feedback: p.feedback,
            block: p.block,
        });
    }
    let mut data = vec![0; alloc.frame_slots as usize];
    data.extend(e.pool);
    Ok(BoardProgram {
        board_id: String::new(),
        kind: BoardKind::Dds,
        counter_board: is_counter,
        lines,
        words,
        data,
        frame_slots: alloc.frame_slots,
        exit_map: alloc.exit_map(),
        regs: alloc.regs.total,
    })
}

fn emit_binary(
    e: &mut Emitter<'_>,
    rd: Reg,
    op: BinOp,
    a: &Operand,
    b: &Operand,
    loc: Option<&SourceLoc>,
    what: &str,
) -> Result<(), CodegenError> {
    match (op, a, b) {
        (_, Operand::Var(x), Operand::Const(c)) if op == BinOp::Add && fits_imm12(*c) => {
            e.emit(Instr::Addi { rd, rs1: e.reg(x), imm: *c }, loc);
        }
        (BinOp::Add, Operand::Const(c), Operand::Var(x)) if fits_imm12(*c) => {
            e.emit(Instr::Addi { rd, rs1: e.reg(x), imm: *c }, loc);
        }
        (BinOp::Sub, Operand::Var(x), Operand::Const(c)) if fits_imm12(c.wrapping_neg()) && *c != i32::MIN => {
            e.emit(Instr::Addi { rd, rs1: e.reg(x), imm: -c }, loc);
        }
        _ => {
            let r = e.operands(&[a, b], loc, what)?;
            let ins = match op {
                BinOp::Add => Instr::Add { rd, rs1: r[0], rs2: r[1] },
                BinOp::Sub => Instr::Sub { rd, rs1: r[0], rs2: r[1] },
            };
            e.emit(ins, loc);
        }
    }
    Ok(())
}

fn emit_branch(e: &mut Emitter<'_>, cond: &Cond, target: BlockId, loc: Option<&SourceLoc>) -> Result<(), CodegenError> {
    let r = e.operands(&[&cond.lhs, &cond.rhs], loc, &cond.to_string())?;
    let (a, b) = (r[0], r[1]);
    let ins = match cond.op {
        CmpOp::LT => Instr::Blt { rs1: a, rs2: b, off: 0 },
        CmpOp::GE => Instr::Bge { rs1: a, rs2: b, off: 0 },
        CmpOp::GT => Instr::Blt { rs1: b, rs2: a, off: 0 },
        CmpOp::LE => Instr::Bge { rs1: b, rs2: a, off: 0 },
        CmpOp::EQ => Instr::Beq { rs1: a, rs2: b, off: 0 },
        CmpOp::NE => Instr::Bne { rs1: a, rs2: b, off: 0 },
    };
    e.emit_full(ins, Some(block_label(target)), loc, false);
    Ok(())
}

/// Largest program over all boards, in instruction words.
pub fn max_words(programs: &[BoardProgram]) -> usize {
    programs.iter().map(BoardProgram::len).max().unwrap_or(0)
}
