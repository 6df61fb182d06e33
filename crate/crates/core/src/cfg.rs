//! Node tree to control-flow graph lowering.
//!
//! Lowering conventions (fixed; golden files depend on them):
//! - `Loop(n)`: the current block initializes a counter to 0 and jumps to a
//!   header that branches on `counter < n` into the body or the exit. The
//!   body ends with `counter = counter + 1` and a back edge to the header.
//! - `While(c)`: header branches on `c`; the body ends with a back edge.
//! - `If`: the current block branches into the then arm (and else arm, if
//!   any); a merge block is always created.
//! - `read_ttl` and `wait_resume` are synchronization boundaries and always
//!   start a new block.
//! - The program ends in a block holding only `halt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::ir::{BasicBlock, BinOp, BlockId, Cfg, Cond, Inst, InstKind, Operand, Rvalue, Terminator, Var};
use crate::program::{ArithExpr, CondExpr, SeqNode, SeqProgram, SourceLoc, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CfgError {
    #[error("unknown state {0:?} at {1}")]
    UnknownState(String, SourceLoc),
}

/// Lowers a validated program. `wait_resume` tags are numbered in order of
/// first appearance; the mapping is returned alongside the graph.
pub fn build_cfg(p: &SeqProgram) -> Result<Cfg, CfgError> {
    Ok(build_cfg_with_tags(p)?.0)
}

pub fn build_cfg_with_tags(p: &SeqProgram) -> Result<(Cfg, BTreeMap<String, u32>), CfgError> {
    let mut lw = Lowerer {
        program: p,
        blocks: Vec::new(),
        depth: Vec::new(),
        current: 0,
        loops: 0,
        temps: 0,
        syncs: 0,
        tags: BTreeMap::new(),
    };
    lw.current = lw.new_block(0, false);
    lw.lower_seq(&p.body, 0)?;
    let outputs: Vec<(String, Var)> = p
        .user_variables()
        .into_iter()
        .map(|n| (n.clone(), Var::new(n)))
        .collect();
    let halt = if lw.blocks[lw.current].insts.is_empty() {
        lw.current
    } else {
        let h = lw.new_block(0, false);
        lw.blocks[lw.current].term = Terminator::Jump(h);
        h
    };
    lw.blocks[halt].term = Terminator::Halt { outputs };
    let cfg = Cfg {
        blocks: lw.blocks,
        loop_depth: lw.depth,
    };
    Ok((cfg, lw.tags))
}

struct Lowerer<'p> {
    program: &'p SeqProgram,
    blocks: Vec<BasicBlock>,
    depth: Vec<u32>,
    current: BlockId,
    loops: u32,
    temps: u32,
    syncs: u32,
    tags: BTreeMap<String, u32>,
}

impl Lowerer<'_> {
    fn new_block(&mut self, depth: u32, cond_entry: bool) -> BlockId {
        let id = self.blocks.len();
        self.blocks.push(BasicBlock {
            id,
            insts: Vec::new(),
            term: Terminator::Halt { outputs: Vec::new() },
            term_loc: None,
            cond_entry,
        });
        self.depth.push(depth);
        id
    }

    fn push(&mut self, kind: InstKind, loc: &SourceLoc) {
        self.blocks[self.current].insts.push(Inst::new(kind, Some(loc.clone())));
    }

    fn terminate(&mut self, term: Terminator, loc: Option<&SourceLoc>) {
        let b = &mut self.blocks[self.current];
        b.term = term;
        b.term_loc = loc.cloned();
    }

    fn fresh_temp(&mut self) -> Var {
        let v = Var::new(format!("%t{}", self.temps));
        self.temps += 1;
        v
    }

    /// Starts a fresh block unless the current one is still empty.
    fn boundary(&mut self, depth: u32, loc: &SourceLoc) {
        if !self.blocks[self.current].insts.is_empty() {
            let next = self.new_block(depth, false);
            self.terminate(Terminator::Jump(next), Some(loc));
            self.current = next;
        }
    }

    fn lower_seq(&mut self, nodes: &[SeqNode], depth: u32) -> Result<(), CfgError> {
        for node in nodes {
            self.lower_node(node, depth)?;
        }
        Ok(())
    }

    fn lower_node(&mut self, node: &SeqNode, depth: u32) -> Result<(), CfgError> {
        match node {
            SeqNode::Play { state, loc } => {
                let idx = self
                    .program
                    .state_index(state)
                    .ok_or_else(|| CfgError::UnknownState(state.clone(), loc.clone()))?;
                self.push(InstKind::PlayStep { state: idx }, loc);
            }
            SeqNode::Assign { target, expr, loc } => {
                let value = self.lower_rvalue(expr, loc);
                self.push(
                    InstKind::Assign {
                        dst: Var::new(target.as_str()),
                        value,
                    },
                    loc,
                );
            }
            SeqNode::ReadTtl { target, counter, loc } => {
                self.boundary(depth, loc);
                let sync = self.syncs;
                self.syncs += 1;
                self.push(InstKind::Barrier { sync }, loc);
                self.push(
                    InstKind::ReadCounter {
                        dst: Var::new(target.as_str()),
                        counter: counter.clone(),
                        sync,
                    },
                    loc,
                );
            }
            SeqNode::WaitResume { tag, loc } => {
                self.boundary(depth, loc);
                let next = self.tags.len() as u32;
                let tag = *self.tags.entry(tag.clone()).or_insert(next);
                self.push(InstKind::WaitHost { tag }, loc);
            }
            SeqNode::Loop { count, body, loc } => {
                let counter = Var::new(format!("%loop{}", self.loops));
                self.loops += 1;
                self.push(
                    InstKind::Assign {
                        dst: counter.clone(),
                        value: Rvalue::Use(Operand::Const(0)),
                    },
                    loc,
                );
                let header = self.new_block(depth + 1, false);
                self.terminate(Terminator::Jump(header), Some(loc));
                let body_block = self.new_block(depth + 1, false);
                self.current = header;
                let cond = Cond {
                    lhs: Operand::Var(counter.clone()),
                    op: crate::program::CmpOp::LT,
                    rhs: Operand::Const(*count as i32),
                };
                self.terminate(
                    Terminator::Branch {
                        cond,
                        then: body_block,
                        else_: body_block,
                    },
                    Some(loc),
                );
                self.current = body_block;
                self.lower_seq(body, depth + 1)?;
                self.push(
                    InstKind::Assign {
                        dst: counter.clone(),
                        value: Rvalue::Binary(BinOp::Add, Operand::Var(counter), Operand::Const(1)),
                    },
                    loc,
                );
                self.terminate(Terminator::Jump(header), Some(loc));
                let exit = self.new_block(depth, false);
                self.patch_else(header, exit);
                self.current = exit;
            }
            SeqNode::While { cond, body, loc } => {
                let header = self.new_block(depth + 1, false);
                self.terminate(Terminator::Jump(header), Some(loc));
                self.current = header;
                let cond = self.lower_cond(cond, loc);
                let body_block = self.new_block(depth + 1, true);
                self.terminate(
                    Terminator::Branch {
                        cond,
                        then: body_block,
                        else_: body_block,
                    },
                    Some(loc),
                );
                self.current = body_block;
                self.lower_seq(body, depth + 1)?;
                self.terminate(Terminator::Jump(header), Some(loc));
                let exit = self.new_block(depth, false);
                self.patch_else(header, exit);
                self.current = exit;
            }
            SeqNode::If { cond, then, else_, loc } => {
                let cond = self.lower_cond(cond, loc);
                let branch_block = self.current;
                let then_block = self.new_block(depth, true);
                self.terminate(
                    Terminator::Branch {
                        cond,
                        then: then_block,
                        else_: then_block,
                    },
                    Some(loc),
                );
                self.current = then_block;
                self.lower_seq(then, depth)?;
                let then_end = self.current;
                let else_ends = match else_ {
                    Some(nodes) => {
                        let else_block = self.new_block(depth, false);
                        self.patch_else(branch_block, else_block);
                        self.current = else_block;
                        self.lower_seq(nodes, depth)?;
                        Some(self.current)
                    }
                    None => None,
                };
                let merge = self.new_block(depth, false);
                self.blocks[then_end].term = Terminator::Jump(merge);
                self.blocks[then_end].term_loc = Some(loc.clone());
                match else_ends {
                    Some(end) => {
                        self.blocks[end].term = Terminator::Jump(merge);
                        self.blocks[end].term_loc = Some(loc.clone());
                    }
                    None => self.patch_else(branch_block, merge),
                }
                self.current = merge;
            }
        }
        Ok(())
    }

    fn patch_else(&mut self, block: BlockId, target: BlockId) {
        if let Terminator::Branch { else_, .. } = &mut self.blocks[block].term {
            *else_ = target;
        }
    }

    fn operand(&mut self, expr: &ArithExpr, loc: &SourceLoc) -> Operand {
        match expr {
            ArithExpr::Var(v) => Operand::Var(Var::new(v.as_str())),
            ArithExpr::Const(c) => Operand::Const(*c),
            _ => {
                let value = self.lower_rvalue(expr, loc);
                let t = self.fresh_temp();
                self.push(InstKind::Assign { dst: t.clone(), value }, loc);
                Operand::Var(t)
            }
        }
    }

    /// Keeps at most one constant per binary operation so that code
    /// generation needs a single scratch register.
    fn materialize(&mut self, value: i32, loc: &SourceLoc) -> Operand {
        let t = self.fresh_temp();
        self.push(
            InstKind::Assign {
                dst: t.clone(),
                value: Rvalue::Use(Operand::Const(value)),
            },
            loc,
        );
        Operand::Var(t)
    }

    fn lower_rvalue(&mut self, expr: &ArithExpr, loc: &SourceLoc) -> Rvalue {
        match expr {
            ArithExpr::Var(_) | ArithExpr::Const(_) => Rvalue::Use(self.operand(expr, loc)),
            ArithExpr::Add(a, b) | ArithExpr::Sub(a, b) => {
                let op = if matches!(expr, ArithExpr::Add(..)) {
                    BinOp::Add
                } else {
                    BinOp::Sub
                };
                let mut lhs = self.operand(a, loc);
                let rhs = self.operand(b, loc);
                if let (Operand::Const(x), Operand::Const(_)) = (&lhs, &rhs) {
                    lhs = self.materialize(*x, loc);
                }
                Rvalue::Binary(op, lhs, rhs)
            }
        }
    }

    fn lower_cond(&mut self, cond: &CondExpr, loc: &SourceLoc) -> Cond {
        let to_operand = |v: &Value| match v {
            Value::Var(n) => Operand::Var(Var::new(n.as_str())),
            Value::Const(c) => Operand::Const(*c),
        };
        let (mut lhs, mut op, mut rhs) = (to_operand(&cond.lhs), cond.op, to_operand(&cond.rhs));
        match (&lhs, &rhs) {
            (Operand::Const(x), Operand::Const(_)) => lhs = self.materialize(*x, loc),
            (Operand::Const(_), Operand::Var(_)) => {
                std::mem::swap(&mut lhs, &mut rhs);
                op = op.mirror();
            }
            _ => {}
        }
        Cond { lhs, op, rhs }
    }
}

/// Blocks unreachable from the entry, ascending.
pub fn detect_dead_code(c: &Cfg) -> Vec<BlockId> {
    c.reachable()
        .iter()
        .enumerate()
        .filter(|(_, r)| !**r)
        .map(|(b, _)| b)
        .collect()
}

/// Drops unreachable blocks, renumbering the rest in their original order.
pub fn prune_unreachable(c: &Cfg) -> Cfg {
    let keep: Vec<BlockId> = c
        .reachable()
        .iter()
        .enumerate()
        .filter(|(_, r)| **r)
        .map(|(b, _)| b)
        .collect();
    c.reorder(&keep)
}

/// Graphviz rendering of the graph.
pub fn to_dot(c: &Cfg) -> String {
    let mut out = String::from("digraph cfg {\n  node [shape=box, fontname=monospace];\n");
    for b in &c.blocks {
        let mut label = format!("b{} (depth {})\\l", b.id, c.loop_depth[b.id]);
        for inst in &b.insts {
            let _ = write!(label, "{}\\l", inst.to_string().replace('"', "\\\""));
        }
        let _ = write!(label, "{}\\l", b.term.to_string().replace('"', "\\\""));
        let _ = writeln!(out, "  b{} [label=\"{}\"];", b.id, label);
    }
    let back = c.back_edges();
    for b in &c.blocks {
        for (i, s) in b.term.successors().into_iter().enumerate() {
            let mut attrs = Vec::new();
            if let Terminator::Branch { .. } = b.term {
                attrs.push(if i == 0 { "label=T" } else { "label=F" });
            }
            if back.contains(&(b.id, s)) {
                attrs.push("style=dashed");
            }
            let _ = writeln!(out, "  b{} -> b{} [{}];", b.id, s, attrs.join(", "));
        }
    }
    out.push_str("}\n");
    out
}
