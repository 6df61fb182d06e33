//! Random structured programs and brute-force reference analyses.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ionctl::ir::{BlockId, Cfg, Var};
use ionctl::program::build::*;
use ionctl::program::{ArithExpr, CmpOp, CondExpr, SeqNode, SeqProgram};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STATES: [(&str, u32); 4] = [("A", 5), ("B", 7), ("C", 11), ("D", 13)];
pub const VARS: [&str; 3] = ["x", "y", "z"];

struct Gen {
    rng: ChaCha8Rng,
    budget: usize,
    whiles: u32,
}

impl Gen {
    fn operand(&mut self) -> ArithExpr {
        if self.rng.gen_bool(0.6) {
            var(VARS[self.rng.gen_range(0..VARS.len())])
        } else {
            konst(self.rng.gen_range(-3..10))
        }
    }

    fn expr(&mut self) -> ArithExpr {
        match self.rng.gen_range(0..4) {
            0 => self.operand(),
            1 => add(self.operand(), self.operand()),
            2 => sub(self.operand(), self.operand()),
            _ => konst(self.rng.gen_range(-5000..5000)),
        }
    }

    fn cond(&mut self) -> CondExpr {
        let ops = [CmpOp::LT, CmpOp::LE, CmpOp::EQ, CmpOp::NE, CmpOp::GE, CmpOp::GT];
        let op = ops[self.rng.gen_range(0..ops.len())];
        let lhs = v(VARS[self.rng.gen_range(0..VARS.len())]);
        let rhs = if self.rng.gen_bool(0.7) {
            c(self.rng.gen_range(0..8))
        } else {
            v(VARS[self.rng.gen_range(0..VARS.len())])
        };
        cond(lhs, op, rhs)
    }

    fn seq(&mut self, depth: u32) -> Vec<SeqNode> {
        let len = self.rng.gen_range(1..4);
        let mut out = Vec::new();
        for _ in 0..len {
            if self.budget == 0 {
                break;
            }
            self.budget -= 1;
            out.extend(self.node(depth));
        }
        if out.is_empty() {
            out.push(play(STATES[0].0));
        }
        out
    }

    fn node(&mut self, depth: u32) -> Vec<SeqNode> {
        let pick = if depth == 0 { self.rng.gen_range(0..3) } else { self.rng.gen_range(0..6) };
        match pick {
            0 => vec![play(STATES[self.rng.gen_range(0..STATES.len())].0)],
            1 => vec![assign(VARS[self.rng.gen_range(0..VARS.len())], self.expr())],
            2 => vec![read_ttl(VARS[self.rng.gen_range(0..VARS.len())], "ttl0", 0)],
            3 => vec![repeat(self.rng.gen_range(1..4), self.seq(depth - 1))],
            4 => {
                let then = self.seq(depth - 1);
                let else_ = self.rng.gen_bool(0.5).then(|| self.seq(depth - 1));
                vec![if_(self.cond(), then, else_)]
            }
            _ => {
                let w = format!("w{}", self.whiles);
                self.whiles += 1;
                let limit = self.rng.gen_range(0..4);
                let mut body = self.seq(depth - 1);
                body.push(assign(&w, add(var(&w), konst(1))));
                vec![assign(&w, konst(0)), while_(cond(v(&w), CmpOp::LT, c(limit)), body)]
            }
        }
    }
}

/// A random program over four states and three variables that are all
/// defined up front. Every loop terminates.
pub fn random_program(seed: u64) -> SeqProgram {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        budget: 14,
        whiles: 0,
    };
    let mut body: Vec<SeqNode> = VARS.iter().map(|x| assign(x, konst(g.rng.gen_range(0..5)))).collect();
    body.extend(g.seq(3));
    body.push(play("A"));
    SeqProgram::new(
        two_board_config(),
        STATES.iter().map(|(n, d)| state(n, *d)).collect(),
        body,
    )
}

/// `k` photon counts that are all live at once when summed.
pub fn pressure_program(k: usize) -> SeqProgram {
    let names: Vec<String> = (0..k).map(|i| format!("r{i}")).collect();
    let mut body = Vec::new();
    for n in &names {
        body.push(play("A"));
        body.push(read_ttl(n, "ttl0", 0));
    }
    body.push(assign("s", konst(0)));
    for n in names.iter().rev() {
        body.push(assign("s", add(var("s"), var(n))));
    }
    for n in &names {
        body.push(assign("s", sub(var("s"), var(n))));
        body.push(assign("s", add(var("s"), var(n))));
    }
    body.push(if_(cond(v("s"), CmpOp::GT, c(10)), vec![play("B")], Some(vec![play("C")])));
    SeqProgram::new(
        two_board_config(),
        STATES.iter().map(|(n, d)| state(n, *d)).collect(),
        body,
    )
}

/// Counts drawn from a seeded generator, 0..10.
pub fn counts(seed: u64) -> impl FnMut(u64) -> i32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |_| rng.gen_range(0..10)
}

fn reachable_without(cfg: &Cfg, removed: Option<BlockId>) -> Vec<bool> {
    let mut seen = vec![false; cfg.len()];
    if removed == Some(Cfg::ENTRY) {
        return seen;
    }
    let mut stack = vec![Cfg::ENTRY];
    seen[Cfg::ENTRY] = true;
    while let Some(b) = stack.pop() {
        for s in cfg.successors(b) {
            if Some(s) != removed && !seen[s] {
                seen[s] = true;
                stack.push(s);
            }
        }
    }
    seen
}

/// `a` dominates `b` iff `b` becomes unreachable once `a` is removed.
pub fn brute_dominators(cfg: &Cfg) -> Vec<BTreeSet<BlockId>> {
    let reach = reachable_without(cfg, None);
    (0..cfg.len())
        .map(|b| {
            if !reach[b] {
                return BTreeSet::new();
            }
            (0..cfg.len())
                .filter(|&a| a == b || (reach[a] && !reachable_without(cfg, Some(a))[b]))
                .collect()
        })
        .collect()
}

/// Blocks where `a`'s dominance ends: `y` has a predecessor dominated by
/// `a` while `a` does not strictly dominate `y`.
pub fn brute_frontiers(cfg: &Cfg) -> Vec<BTreeSet<BlockId>> {
    let dom = brute_dominators(cfg);
    let preds = cfg.predecessors();
    let reach = reachable_without(cfg, None);
    (0..cfg.len())
        .map(|a| {
            (0..cfg.len())
                .filter(|&y| reach[y])
                .filter(|&y| {
                    let strict = a != y && dom[y].contains(&a);
                    !strict && preds[y].iter().any(|&p| reach[p] && dom[p].contains(&a))
                })
                .collect()
        })
        .collect()
}

pub fn brute_idf(df: &[BTreeSet<BlockId>], set: &BTreeSet<BlockId>) -> BTreeSet<BlockId> {
    let mut out = BTreeSet::new();
    loop {
        let mut next = out.clone();
        for b in set.iter().chain(out.iter()) {
            next.extend(df[*b].iter().copied());
        }
        if next == out {
            return out;
        }
        out = next;
    }
}

/// Is `v` read on some path from the start of `b` before being written?
pub fn brute_live_in(cfg: &Cfg, b: BlockId, v: &Var) -> bool {
    let mut seen = BTreeSet::new();
    let mut stack = vec![b];
    while let Some(b) = stack.pop() {
        if !seen.insert(b) {
            continue;
        }
        let block = &cfg.blocks[b];
        let mut killed = false;
        for inst in &block.insts {
            if inst.uses().contains(&v) {
                return true;
            }
            if inst.def() == Some(v) {
                killed = true;
                break;
            }
        }
        if killed {
            continue;
        }
        if block.term.uses().contains(&v) {
            return true;
        }
        stack.extend(cfg.successors(b));
    }
    false
}

/// Same steps, reads and waits; outputs agree on every variable the second
/// run reports, and the second run reports every up-front variable.
pub fn assert_same_behavior(base: &ionctl::interp::Trace, other: &ionctl::interp::Trace, what: &str) {
    assert_eq!(base.steps, other.steps, "{what}: steps");
    assert_eq!(base.reads, other.reads, "{what}: reads");
    assert_eq!(base.waits, other.waits, "{what}: waits");
    for (k, val) in &other.outputs {
        assert_eq!(base.outputs.get(k), Some(val), "{what}: output {k}");
    }
    for k in VARS {
        if base.outputs.contains_key(k) {
            assert!(other.outputs.contains_key(k), "{what}: lost output {k}");
        }
    }
}
