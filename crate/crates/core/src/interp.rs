//! Reference interpreter for the mid-level IR at every stage: before SSA,
//! in SSA form, after phi elimination and after register allocation.
//! Arithmetic wraps at 32 bits, like the target.

use std::collections::BTreeMap;

use crate::ir::{BinOp, BlockId, Cfg, Cond, InstKind, Operand, Rvalue, Terminator, Var};
use crate::regalloc::{Allocation, Location, RegFile};
use crate::ssa::Phi;

/// Observable behavior of one run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    /// Played states, by index into the program's state list.
    pub steps: Vec<usize>,
    pub reads: u64,
    pub waits: Vec<u32>,
    pub outputs: BTreeMap<String, i32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InterpError {
    #[error("step limit of {0} exceeded")]
    StepLimit(u64),
    #[error("read of undefined value {0}")]
    Undefined(String),
}

/// Supplies the photon count of the n-th read.
pub type CountSource<'a> = &'a mut dyn FnMut(u64) -> i32;

trait Store {
    fn get(&self, v: &Var) -> Result<i32, InterpError>;
    fn set(&mut self, v: &Var, value: i32);
    fn load(&self, slot: u32) -> i32;
    fn store(&mut self, slot: u32, value: i32);
}

#[derive(Default)]
struct VarStore {
    vars: BTreeMap<Var, i32>,
    mem: BTreeMap<u32, i32>,
}

impl Store for VarStore {
    fn get(&self, v: &Var) -> Result<i32, InterpError> {
        self.vars.get(v).copied().ok_or_else(|| InterpError::Undefined(v.to_string()))
    }
    fn set(&mut self, v: &Var, value: i32) {
        self.vars.insert(v.clone(), value);
    }
    fn load(&self, slot: u32) -> i32 {
        self.mem.get(&slot).copied().unwrap_or(0)
    }
    fn store(&mut self, slot: u32, value: i32) {
        self.mem.insert(slot, value);
    }
}

struct RegStore<'a> {
    assignment: &'a BTreeMap<Var, u8>,
    regs: Vec<i32>,
    mem: BTreeMap<u32, i32>,
}

impl Store for RegStore<'_> {
    fn get(&self, v: &Var) -> Result<i32, InterpError> {
        let r = self.assignment.get(v).ok_or_else(|| InterpError::Undefined(v.to_string()))?;
        Ok(self.regs[*r as usize])
    }
    fn set(&mut self, v: &Var, value: i32) {
        let r = self.assignment[v] as usize;
        if r != RegFile::ZERO as usize {
            self.regs[r] = value;
        }
    }
    fn load(&self, slot: u32) -> i32 {
        self.mem.get(&slot).copied().unwrap_or(0)
    }
    fn store(&mut self, slot: u32, value: i32) {
        self.mem.insert(slot, value);
    }
}

fn operand(s: &dyn Store, o: &Operand) -> Result<i32, InterpError> {
    match o {
        Operand::Var(v) => s.get(v),
        Operand::Const(c) => Ok(*c),
    }
}

fn eval_cond(s: &dyn Store, c: &Cond) -> Result<bool, InterpError> {
    Ok(c.op.eval(operand(s, &c.lhs)?, operand(s, &c.rhs)?))
}

/// Runs the block-level machine. Returns the halting block's outputs as
/// (name, value-or-none) so that callers can decide how to read them.
fn execute(
    cfg: &Cfg,
    phis: Option<&[Vec<Phi>]>,
    store: &mut dyn Store,
    counts: CountSource<'_>,
    max_steps: u64,
) -> Result<(Trace, BlockId), InterpError> {
    let mut trace = Trace::default();
    let mut block = Cfg::ENTRY;
    let mut budget = max_steps;
    loop {
        let b = &cfg.blocks[block];
        for inst in &b.insts {
            budget = budget.checked_sub(1).ok_or(InterpError::StepLimit(max_steps))?;
            match &inst.kind {
                InstKind::PlayStep { state } => trace.steps.push(*state),
                InstKind::Assign { dst, value } => {
                    let v = match value {
                        Rvalue::Use(a) => operand(store, a)?,
                        Rvalue::Binary(op, a, b) => {
                            let (a, b) = (operand(store, a)?, operand(store, b)?);
                            match op {
                                BinOp::Add => a.wrapping_add(b),
                                BinOp::Sub => a.wrapping_sub(b),
                            }
                        }
                    };
                    store.set(dst, v);
                }
                InstKind::Barrier { .. } => {}
                InstKind::ReadCounter { dst, .. } => {
                    let v = counts(trace.reads);
                    trace.reads += 1;
                    store.set(dst, v);
                }
                InstKind::WaitHost { tag } => trace.waits.push(*tag),
                InstKind::Load { dst, slot } => {
                    let v = store.load(*slot);
                    store.set(dst, v);
                }
                InstKind::Store { src, slot } => {
                    let v = store.get(src)?;
                    store.store(*slot, v);
                }
            }
        }
        budget = budget.checked_sub(1).ok_or(InterpError::StepLimit(max_steps))?;
        let next = match &b.term {
            Terminator::Halt { .. } => return Ok((trace, block)),
            Terminator::Jump(t) => *t,
            Terminator::Branch { cond, then, else_ } => {
                if eval_cond(store, cond)? {
                    *then
                } else {
                    *else_
                }
            }
        };
        if let Some(phis) = phis {
            let mut vals = Vec::new();
            for phi in &phis[next] {
                let arg = phi.args.iter().find(|(p, _)| *p == block).and_then(|(_, a)| a.as_ref());
                // undefined incoming values stay undefined
                if let Some(a) = arg {
                    if let Ok(v) = store.get(a) {
                        vals.push((phi.dst.clone(), v));
                    }
                }
            }
            for (d, v) in vals {
                store.set(&d, v);
            }
        }
        block = next;
    }
}

/// Runs a graph (optionally with phi nodes) on named variables. Outputs
/// that are undefined on the executed path are omitted.
pub fn run_cfg(
    cfg: &Cfg,
    phis: Option<&[Vec<Phi>]>,
    counts: CountSource<'_>,
    max_steps: u64,
) -> Result<Trace, InterpError> {
    let mut store = VarStore::default();
    let (mut trace, halt) = execute(cfg, phis, &mut store, counts, max_steps)?;
    if let Terminator::Halt { outputs } = &cfg.blocks[halt].term {
        for (name, v) in outputs {
            if let Ok(val) = store.get(v) {
                trace.outputs.insert(name.clone(), val);
            }
        }
    }
    Ok(trace)
}

/// Runs an allocated program on a register file and a spill frame.
pub fn run_allocated(alloc: &Allocation, counts: CountSource<'_>, max_steps: u64) -> Result<Trace, InterpError> {
    let mut store = RegStore {
        assignment: &alloc.assignment,
        regs: vec![0; alloc.regs.total as usize],
        mem: BTreeMap::new(),
    };
    let (mut trace, _) = execute(&alloc.cfg, None, &mut store, counts, max_steps)?;
    for (name, loc) in alloc.exit_map() {
        let v = match loc {
            Location::Reg(r) => store.regs[r as usize],
            Location::Slot(s) => store.load(s),
        };
        trace.outputs.insert(name, v);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::build_cfg;
    use crate::program::build::*;
    use crate::program::{CmpOp, SeqProgram};

    #[test]
    fn feedback_loop_counts_and_branches() {
        let body = vec![
            assign("dark", konst(0)),
            repeat(
                4,
                vec![
                    play("A"),
                    read_ttl("n", "ttl0", 0),
                    if_(
                        cond(v("n"), CmpOp::LT, c(5)),
                        vec![play("B"), assign("dark", add(var("dark"), konst(1)))],
                        None,
                    ),
                ],
            ),
        ];
        let p = SeqProgram::new(two_board_config(), vec![state("A", 1), state("B", 2)], body);
        let cfg = build_cfg(&p).unwrap();
        let script = [9, 1, 9, 2];
        let t = run_cfg(&cfg, None, &mut |i| script[i as usize], 10_000).unwrap();
        assert_eq!(t.steps, vec![0, 0, 1, 0, 0, 1]);
        assert_eq!(t.reads, 4);
        assert_eq!(t.outputs["dark"], 2);
    }

    #[test]
    fn runaway_loop_hits_step_limit() {
        let body = vec![
            assign("x", konst(0)),
            while_(cond(v("x"), CmpOp::EQ, c(0)), vec![play("A")]),
        ];
        let p = SeqProgram::new(two_board_config(), vec![state("A", 1)], body);
        let cfg = build_cfg(&p).unwrap();
        let err = run_cfg(&cfg, None, &mut |_| 0, 1000).unwrap_err();
        assert_eq!(err, InterpError::StepLimit(1000));
    }

    #[test]
    fn arithmetic_wraps() {
        let body = vec![
            assign("x", konst(i32::MAX)),
            assign("x", add(var("x"), konst(1))),
        ];
        let p = SeqProgram::new(two_board_config(), vec![], body);
        let t = run_cfg(&build_cfg(&p).unwrap(), None, &mut |_| 0, 100).unwrap();
        assert_eq!(t.outputs["x"], i32::MIN);
    }
}
