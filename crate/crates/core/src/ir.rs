//! Mid-level IR shared by the middle-end stages: basic blocks of
//! straight-line instructions, each closed by one terminator.

use std::collections::BTreeSet;
use std::fmt;

use crate::program::{ChannelRef, CmpOp, SourceLoc};

pub type BlockId = usize;

/// A variable. `version` is 0 before SSA construction; SSA versions start at 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    pub name: String,
    pub version: u32,
}

impl Var {
    pub fn new(name: impl Into<String>) -> Self {
        Var {
            name: name.into(),
            version: 0,
        }
    }

    pub fn versioned(name: impl Into<String>, version: u32) -> Self {
        Var {
            name: name.into(),
            version,
        }
    }

    /// Compiler-introduced variables start with `%`.
    pub fn is_internal(&self) -> bool {
        self.name.starts_with('%')
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.version == 0 {
            f.write_str(&self.name)
        } else {
            write!(f, "{}.{}", self.name, self.version)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Var(Var),
    Const(i32),
}

impl Operand {
    pub fn as_var(&self) -> Option<&Var> {
        match self {
            Operand::Var(v) => Some(v),
            Operand::Const(_) => None,
        }
    }

    fn as_var_mut(&mut self) -> Option<&mut Var> {
        match self {
            Operand::Var(v) => Some(v),
            Operand::Const(_) => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Var(v) => v.fmt(f),
            Operand::Const(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Rvalue {
    Use(Operand),
    Binary(BinOp, Operand, Operand),
}

impl Rvalue {
    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            Rvalue::Use(a) => vec![a],
            Rvalue::Binary(_, a, b) => vec![a, b],
        }
    }

    fn operands_mut(&mut self) -> Vec<&mut Operand> {
        match self {
            Rvalue::Use(a) => vec![a],
            Rvalue::Binary(_, a, b) => vec![a, b],
        }
    }
}

impl fmt::Display for Rvalue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rvalue::Use(a) => a.fmt(f),
            Rvalue::Binary(BinOp::Add, a, b) => write!(f, "{a} + {b}"),
            Rvalue::Binary(BinOp::Sub, a, b) => write!(f, "{a} - {b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Cond {
    pub lhs: Operand,
    pub op: CmpOp,
    pub rhs: Operand,
}

impl Cond {
    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        [&self.lhs, &self.rhs].into_iter().filter_map(Operand::as_var)
    }
}

impl fmt::Display for Cond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.op.symbol(), self.rhs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum InstKind {
    /// Enqueue the step of the given program state (index into `SeqProgram::states`).
    PlayStep { state: usize },
    Assign { dst: Var, value: Rvalue },
    /// Synchronization boundary opening read cycle `sync`.
    Barrier { sync: u32 },
    /// `dst` receives the photon count of read cycle `sync`.
    ReadCounter { dst: Var, counter: ChannelRef, sync: u32 },
    WaitHost { tag: u32 },
    Load { dst: Var, slot: u32 },
    Store { src: Var, slot: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Inst {
    pub kind: InstKind,
    pub loc: Option<SourceLoc>,
}

impl Inst {
    pub fn new(kind: InstKind, loc: Option<SourceLoc>) -> Self {
        Inst { kind, loc }
    }

    pub fn def(&self) -> Option<&Var> {
        match &self.kind {
            InstKind::Assign { dst, .. }
            | InstKind::ReadCounter { dst, .. }
            | InstKind::Load { dst, .. } => Some(dst),
            _ => None,
        }
    }

    pub fn def_mut(&mut self) -> Option<&mut Var> {
        match &mut self.kind {
            InstKind::Assign { dst, .. }
            | InstKind::ReadCounter { dst, .. }
            | InstKind::Load { dst, .. } => Some(dst),
            _ => None,
        }
    }

    pub fn uses(&self) -> Vec<&Var> {
        match &self.kind {
            InstKind::Assign { value, .. } => {
                value.operands().into_iter().filter_map(Operand::as_var).collect()
            }
            InstKind::Store { src, .. } => vec![src],
            _ => Vec::new(),
        }
    }

    pub fn uses_mut(&mut self) -> Vec<&mut Var> {
        match &mut self.kind {
            InstKind::Assign { value, .. } => value
                .operands_mut()
                .into_iter()
                .filter_map(Operand::as_var_mut)
                .collect(),
            InstKind::Store { src, .. } => vec![src],
            _ => Vec::new(),
        }
    }

    /// `dst = src` between two variables.
    pub fn as_copy(&self) -> Option<(&Var, &Var)> {
        match &self.kind {
            InstKind::Assign {
                dst,
                value: Rvalue::Use(Operand::Var(src)),
            } => Some((dst, src)),
            _ => None,
        }
    }
}

impl fmt::Display for Inst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            InstKind::PlayStep { state } => write!(f, "play_step s{state}"),
            InstKind::Assign { dst, value } => write!(f, "{dst} = {value}"),
            InstKind::Barrier { sync } => write!(f, "barrier #{sync}"),
            InstKind::ReadCounter { dst, counter, sync } => {
                write!(f, "{dst} = read_counter {counter} #{sync}")
            }
            InstKind::WaitHost { tag } => write!(f, "wait_host {tag}"),
            InstKind::Load { dst, slot } => write!(f, "{dst} = load [{slot}]"),
            InstKind::Store { src, slot } => write!(f, "store [{slot}] = {src}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Terminator {
    Jump(BlockId),
    Branch {
        cond: Cond,
        then: BlockId,
        else_: BlockId,
    },
    /// End of program. `outputs` pairs each observable source variable with
    /// the IR variable holding its final value; they count as uses.
    Halt { outputs: Vec<(String, Var)> },
}

impl Terminator {
    pub fn successors(&self) -> Vec<BlockId> {
        match self {
            Terminator::Jump(b) => vec![*b],
            Terminator::Branch { then, else_, .. } => vec![*then, *else_],
            Terminator::Halt { .. } => Vec::new(),
        }
    }

    pub fn uses(&self) -> Vec<&Var> {
        match self {
            Terminator::Jump(_) => Vec::new(),
            Terminator::Branch { cond, .. } => cond.vars().collect(),
            Terminator::Halt { outputs } => outputs.iter().map(|(_, v)| v).collect(),
        }
    }

    pub fn uses_mut(&mut self) -> Vec<&mut Var> {
        match self {
            Terminator::Jump(_) => Vec::new(),
            Terminator::Branch { cond, .. } => [&mut cond.lhs, &mut cond.rhs]
                .into_iter()
                .filter_map(Operand::as_var_mut)
                .collect(),
            Terminator::Halt { outputs } => outputs.iter_mut().map(|(_, v)| v).collect(),
        }
    }

    pub fn retarget(&mut self, from: BlockId, to: BlockId) {
        match self {
            Terminator::Jump(b) if *b == from => *b = to,
            Terminator::Branch { then, else_, .. } => {
                if *then == from {
                    *then = to;
                }
                if *else_ == from {
                    *else_ = to;
                }
            }
            _ => {}
        }
    }

    fn remap(&mut self, map: &[BlockId]) {
        match self {
            Terminator::Jump(b) => *b = map[*b],
            Terminator::Branch { then, else_, .. } => {
                *then = map[*then];
                *else_ = map[*else_];
            }
            Terminator::Halt { .. } => {}
        }
    }
}

impl fmt::Display for Terminator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terminator::Jump(b) => write!(f, "jump b{b}"),
            Terminator::Branch { cond, then, else_ } => {
                write!(f, "branch {cond} ? b{then} : b{else_}")
            }
            Terminator::Halt { outputs } => {
                f.write_str("halt")?;
                if !outputs.is_empty() {
                    let outs: Vec<String> =
                        outputs.iter().map(|(n, v)| format!("{n}={v}")).collect();
                    write!(f, " [{}]", outs.join(", "))?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BasicBlock {
    pub id: BlockId,
    pub insts: Vec<Inst>,
    pub term: Terminator,
    pub term_loc: Option<SourceLoc>,
    /// First block of a conditional arm (then-arm or while body): the first
    /// step it plays is the response of a feedback decision.
    pub cond_entry: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Cfg {
    pub blocks: Vec<BasicBlock>,
    pub loop_depth: Vec<u32>,
}

impl Cfg {
    pub const ENTRY: BlockId = 0;

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn successors(&self, b: BlockId) -> Vec<BlockId> {
        self.blocks[b].term.successors()
    }

    pub fn predecessors(&self) -> Vec<Vec<BlockId>> {
        let mut preds = vec![Vec::new(); self.blocks.len()];
        for b in &self.blocks {
            for s in b.term.successors() {
                if !preds[s].contains(&b.id) {
                    preds[s].push(b.id);
                }
            }
        }
        preds
    }

    /// Blocks reachable from the entry.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.blocks.len()];
        if self.blocks.is_empty() {
            return seen;
        }
        let mut stack = vec![Self::ENTRY];
        seen[Self::ENTRY] = true;
        while let Some(b) = stack.pop() {
            for s in self.successors(b) {
                if !seen[s] {
                    seen[s] = true;
                    stack.push(s);
                }
            }
        }
        seen
    }

    /// Reverse postorder from the entry (reachable blocks only).
    pub fn reverse_postorder(&self) -> Vec<BlockId> {
        let mut order = Vec::new();
        let mut visited = vec![false; self.blocks.len()];
        let mut stack: Vec<(BlockId, usize)> = vec![(Self::ENTRY, 0)];
        visited[Self::ENTRY] = true;
        while let Some((b, i)) = stack.pop() {
            let succs = self.successors(b);
            if i < succs.len() {
                stack.push((b, i + 1));
                let s = succs[i];
                if !visited[s] {
                    visited[s] = true;
                    stack.push((s, 0));
                }
            } else {
                order.push(b);
            }
        }
        order.reverse();
        order
    }

    /// Edges `(from, to)` that close a cycle in a depth-first walk.
    pub fn back_edges(&self) -> Vec<(BlockId, BlockId)> {
        let n = self.blocks.len();
        let mut state = vec![0u8; n]; // 0 new, 1 on stack, 2 done
        let mut edges = Vec::new();
        if n == 0 {
            return edges;
        }
        let mut stack: Vec<(BlockId, usize)> = vec![(Self::ENTRY, 0)];
        state[Self::ENTRY] = 1;
        while let Some((b, i)) = stack.pop() {
            let succs = self.successors(b);
            if i < succs.len() {
                stack.push((b, i + 1));
                let s = succs[i];
                match state[s] {
                    0 => {
                        state[s] = 1;
                        stack.push((s, 0));
                    }
                    1 => edges.push((b, s)),
                    _ => {}
                }
            } else {
                state[b] = 2;
            }
        }
        edges.sort_unstable();
        edges
    }

    /// All variables mentioned anywhere.
    pub fn variables(&self) -> BTreeSet<Var> {
        let mut vars = BTreeSet::new();
        for b in &self.blocks {
            for inst in &b.insts {
                vars.extend(inst.def().cloned());
                vars.extend(inst.uses().into_iter().cloned());
            }
            vars.extend(b.term.uses().into_iter().cloned());
        }
        vars
    }

    /// Renumbers blocks so that `order[i]` becomes block `i`. Blocks not in
    /// `order` are dropped; they must not be referenced by kept blocks.
    pub fn reorder(&self, order: &[BlockId]) -> Cfg {
        let mut map = vec![usize::MAX; self.blocks.len()];
        for (new, &old) in order.iter().enumerate() {
            map[old] = new;
        }
        let mut blocks = Vec::with_capacity(order.len());
        let mut loop_depth = Vec::with_capacity(order.len());
        for (new, &old) in order.iter().enumerate() {
            let mut b = self.blocks[old].clone();
            b.id = new;
            b.term.remap(&map);
            blocks.push(b);
            loop_depth.push(self.loop_depth[old]);
        }
        Cfg { blocks, loop_depth }
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.insts.len()).sum()
    }
}

impl fmt::Display for Cfg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            write!(f, "b{} (depth {})", b.id, self.loop_depth[b.id])?;
            if b.cond_entry {
                f.write_str(" cond-entry")?;
            }
            f.write_str(":\n")?;
            for inst in &b.insts {
                write_with_loc(f, &inst.to_string(), inst.loc.as_ref())?;
            }
            write_with_loc(f, &b.term.to_string(), b.term_loc.as_ref())?;
        }
        Ok(())
    }
}

fn write_with_loc(f: &mut fmt::Formatter<'_>, text: &str, loc: Option<&SourceLoc>) -> fmt::Result {
    match loc {
        Some(loc) => writeln!(f, "    {text:<40} ; {loc}"),
        None => writeln!(f, "    {text}"),
    }
}
