//! Dominators, dominance frontiers and minimal SSA construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use crate::ir::{BlockId, Cfg, InstKind, Operand, Rvalue, Terminator, Var};
use crate::program::SourceLoc;

/// Immediate dominators. `idom[entry]` and unreachable blocks are `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dominators {
    pub idom: Vec<Option<BlockId>>,
}

impl Dominators {
    /// Iterative two-finger algorithm over reverse postorder.
    pub fn compute(cfg: &Cfg) -> Self {
        let n = cfg.len();
        let rpo = cfg.reverse_postorder();
        let mut order = vec![usize::MAX; n];
        for (i, &b) in rpo.iter().enumerate() {
            order[b] = i;
        }
        let preds = cfg.predecessors();
        let mut idom: Vec<Option<BlockId>> = vec![None; n];
        if n == 0 {
            return Dominators { idom };
        }
        idom[Cfg::ENTRY] = Some(Cfg::ENTRY);
        let mut changed = true;
        while changed {
            changed = false;
            for &b in rpo.iter().skip(1) {
                let mut new_idom: Option<BlockId> = None;
                for &p in &preds[b] {
                    if idom[p].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => intersect(&idom, &order, p, cur),
                    });
                }
                if new_idom != idom[b] {
                    idom[b] = new_idom;
                    changed = true;
                }
            }
        }
        idom[Cfg::ENTRY] = None;
        Dominators { idom }
    }

    /// Whether `a` dominates `b` (reflexive).
    pub fn dominates(&self, a: BlockId, b: BlockId) -> bool {
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            match self.idom[cur] {
                Some(p) => cur = p,
                None => return false,
            }
        }
    }

    pub fn children(&self) -> Vec<Vec<BlockId>> {
        let mut children = vec![Vec::new(); self.idom.len()];
        for (b, d) in self.idom.iter().enumerate() {
            if let Some(d) = d {
                children[*d].push(b);
            }
        }
        children
    }
}

fn intersect(idom: &[Option<BlockId>], order: &[usize], mut a: BlockId, mut b: BlockId) -> BlockId {
    while a != b {
        while order[a] > order[b] {
            a = idom[a].expect("processed");
        }
        while order[b] > order[a] {
            b = idom[b].expect("processed");
        }
    }
    a
}

/// Dominance frontier of every block.
pub fn dominance_frontiers(cfg: &Cfg, dom: &Dominators) -> Vec<BTreeSet<BlockId>> {
    let mut df = vec![BTreeSet::new(); cfg.len()];
    let preds = cfg.predecessors();
    for b in 0..cfg.len() {
        if preds[b].len() < 2 {
            continue;
        }
        for &p in &preds[b] {
            if p != Cfg::ENTRY && dom.idom[p].is_none() {
                continue;
            }
            let mut runner = Some(p);
            while let Some(r) = runner {
                if Some(r) == dom.idom[b] {
                    break;
                }
                df[r].insert(b);
                runner = dom.idom[r];
            }
        }
    }
    df
}

/// Iterated dominance frontier of a set of blocks.
pub fn iterated_frontier(df: &[BTreeSet<BlockId>], blocks: &BTreeSet<BlockId>) -> BTreeSet<BlockId> {
    let mut result = BTreeSet::new();
    let mut work: Vec<BlockId> = blocks.iter().copied().collect();
    let mut seen = blocks.clone();
    while let Some(b) = work.pop() {
        for &f in &df[b] {
            if result.insert(f) && seen.insert(f) {
                work.push(f);
            }
        }
    }
    result
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Phi {
    pub dst: Var,
    /// One argument per predecessor; `None` when no definition reaches.
    pub args: Vec<(BlockId, Option<Var>)>,
}

impl fmt::Display for Phi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let args: Vec<String> = self
            .args
            .iter()
            .map(|(b, v)| match v {
                Some(v) => format!("b{b}: {v}"),
                None => format!("b{b}: undef"),
            })
            .collect();
        write!(f, "{} = phi({})", self.dst, args.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SsaError {
    #[error("variable {var:?} may be used before it is defined{}", loc.as_ref().map(|l| format!(" at {l}")).unwrap_or_default())]
    UseBeforeDef { var: String, loc: Option<SourceLoc> },
    #[error("block b{0} is unreachable; prune dead code first")]
    Unreachable(BlockId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsaProgram {
    pub cfg: Cfg,
    pub phis: Vec<Vec<Phi>>,
    pub dom: Dominators,
    pub frontiers: Vec<BTreeSet<BlockId>>,
    /// SSA values that are undefined along some path from the entry.
    pub maybe_undef: BTreeSet<Var>,
}

impl SsaProgram {
    /// Number of SSA values, not counting definitions that only load a
    /// constant.
    pub fn var_count(&self) -> usize {
        let phis = self.phis.iter().map(Vec::len).sum::<usize>();
        let defs = self
            .cfg
            .blocks
            .iter()
            .flat_map(|b| &b.insts)
            .filter(|i| i.def().is_some())
            .filter(|i| {
                !matches!(
                    i.kind,
                    InstKind::Assign {
                        value: Rvalue::Use(Operand::Const(_)),
                        ..
                    }
                )
            })
            .count();
        phis + defs
    }

    pub fn phi_count(&self) -> usize {
        self.phis.iter().map(Vec::len).sum()
    }

    /// Checks the single-definition and dominance properties.
    pub fn verify(&self) -> Result<(), String> {
        let mut def_site: BTreeMap<&Var, (BlockId, usize)> = BTreeMap::new();
        for b in &self.cfg.blocks {
            for phi in &self.phis[b.id] {
                if def_site.insert(&phi.dst, (b.id, 0)).is_some() {
                    return Err(format!("{} defined twice", phi.dst));
                }
            }
            for (i, inst) in b.insts.iter().enumerate() {
                if let Some(d) = inst.def() {
                    if def_site.insert(d, (b.id, i + 1)).is_some() {
                        return Err(format!("{d} defined twice"));
                    }
                }
            }
        }
        let dominated = |v: &Var, block: BlockId, pos: usize| -> Result<(), String> {
            let (db, dp) = def_site.get(v).ok_or_else(|| format!("{v} used but never defined"))?;
            let ok = if *db == block { *dp < pos } else { self.dom.dominates(*db, block) };
            if ok {
                Ok(())
            } else {
                Err(format!("use of {v} in b{block} not dominated by its definition"))
            }
        };
        let preds = self.cfg.predecessors();
        for b in &self.cfg.blocks {
            for phi in &self.phis[b.id] {
                let arg_blocks: BTreeSet<BlockId> = phi.args.iter().map(|(p, _)| *p).collect();
                if arg_blocks != preds[b.id].iter().copied().collect() {
                    return Err(format!("phi {} in b{} does not match predecessors", phi.dst, b.id));
                }
                for (p, v) in &phi.args {
                    if let Some(v) = v {
                        dominated(v, *p, usize::MAX)?;
                    }
                }
            }
            for (i, inst) in b.insts.iter().enumerate() {
                for u in inst.uses() {
                    dominated(u, b.id, i + 1)?;
                }
            }
            for u in b.term.uses() {
                dominated(u, b.id, usize::MAX)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for SsaProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.cfg.blocks {
            let idom = match self.dom.idom[b.id] {
                Some(d) => format!("b{d}"),
                None => "-".into(),
            };
            let df: Vec<String> = self.frontiers[b.id].iter().map(|x| format!("b{x}")).collect();
            writeln!(f, "b{} (idom {}, df {{{}}}):", b.id, idom, df.join(", "))?;
            for phi in &self.phis[b.id] {
                writeln!(f, "    {phi}")?;
            }
            for inst in &b.insts {
                writeln!(f, "    {inst}")?;
            }
            writeln!(f, "    {}", b.term)?;
        }
        Ok(())
    }
}

/// Converts a graph without unreachable blocks into SSA form.
pub fn construct_ssa(cfg: &Cfg) -> Result<SsaProgram, SsaError> {
    if let Some(b) = cfg.reachable().iter().position(|r| !r) {
        return Err(SsaError::Unreachable(b));
    }
    let dom = Dominators::compute(cfg);
    let frontiers = dominance_frontiers(cfg, &dom);
    let preds = cfg.predecessors();

    let mut def_blocks: BTreeMap<String, BTreeSet<BlockId>> = BTreeMap::new();
    for b in &cfg.blocks {
        for inst in &b.insts {
            if let Some(d) = inst.def() {
                def_blocks.entry(d.name.clone()).or_default().insert(b.id);
            }
        }
    }
    let mut phis: Vec<Vec<Phi>> = vec![Vec::new(); cfg.len()];
    for (name, blocks) in &def_blocks {
        for b in iterated_frontier(&frontiers, blocks) {
            phis[b].push(Phi {
                dst: Var::new(name.as_str()),
                args: preds[b].iter().map(|&p| (p, None)).collect(),
            });
        }
    }

    let mut out = cfg.clone();
    let mut renamer = Renamer::default();
    let children = dom.children();
    let mut undefined_uses: Vec<(String, Option<SourceLoc>)> = Vec::new();

    enum Step {
        Enter(BlockId),
        Exit(Vec<String>),
    }
    let mut stack = vec![Step::Enter(Cfg::ENTRY)];
    while let Some(step) = stack.pop() {
        let b = match step {
            Step::Exit(pushed) => {
                for name in pushed {
                    renamer.stacks.get_mut(&name).expect("pushed").pop();
                }
                continue;
            }
            Step::Enter(b) => b,
        };
        let mut pushed = Vec::new();
        for phi in &mut phis[b] {
            phi.dst = renamer.define(&phi.dst.name);
            pushed.push(phi.dst.name.clone());
        }
        let block = &mut out.blocks[b];
        for inst in &mut block.insts {
            let loc = inst.loc.clone();
            for u in inst.uses_mut() {
                match renamer.current(&u.name) {
                    Some(v) => *u = v,
                    None => undefined_uses.push((u.name.clone(), loc.clone())),
                }
            }
            if let Some(d) = inst.def_mut() {
                *d = renamer.define(&d.name);
                pushed.push(d.name.clone());
            }
        }
        let term_loc = block.term_loc.clone();
        match &mut block.term {
            Terminator::Halt { outputs } => {
                outputs.retain_mut(|(_, v)| match renamer.current(&v.name) {
                    Some(cur) => {
                        *v = cur;
                        true
                    }
                    None => false,
                });
            }
            term => {
                for u in term.uses_mut() {
                    match renamer.current(&u.name) {
                        Some(v) => *u = v,
                        None => undefined_uses.push((u.name.clone(), term_loc.clone())),
                    }
                }
            }
        }
        for s in cfg.successors(b) {
            for phi in &mut phis[s] {
                let base = phi.dst.name.clone();
                let cur = renamer.current(&base);
                for (p, arg) in &mut phi.args {
                    if *p == b {
                        *arg = cur.clone();
                    }
                }
            }
        }
        stack.push(Step::Exit(pushed));
        for &c in children[b].iter().rev() {
            stack.push(Step::Enter(c));
        }
    }
    if let Some((var, loc)) = undefined_uses.into_iter().next() {
        return Err(SsaError::UseBeforeDef { var, loc });
    }

    let mut maybe_undef = BTreeSet::new();
    let mut changed = true;
    while changed {
        changed = false;
        for phi in phis.iter().flatten() {
            if maybe_undef.contains(&phi.dst) {
                continue;
            }
            if phi
                .args
                .iter()
                .any(|(_, a)| a.as_ref().is_none_or(|v| maybe_undef.contains(v)))
            {
                maybe_undef.insert(phi.dst.clone());
                changed = true;
            }
        }
    }
    for b in &mut out.blocks {
        for inst in &b.insts {
            if let Some(u) = inst.uses().into_iter().find(|u| maybe_undef.contains(*u)) {
                return Err(SsaError::UseBeforeDef {
                    var: u.name.clone(),
                    loc: inst.loc.clone(),
                });
            }
        }
        match &mut b.term {
            Terminator::Halt { outputs } => outputs.retain(|(_, v)| !maybe_undef.contains(v)),
            term => {
                if let Some(u) = term.uses().into_iter().find(|u| maybe_undef.contains(*u)) {
                    return Err(SsaError::UseBeforeDef {
                        var: u.name.clone(),
                        loc: b.term_loc.clone(),
                    });
                }
            }
        }
    }

    Ok(SsaProgram {
        cfg: out,
        phis,
        dom,
        frontiers,
        maybe_undef,
    })
}

#[derive(Default)]
struct Renamer {
    counters: BTreeMap<String, u32>,
    stacks: BTreeMap<String, Vec<Var>>,
}

impl Renamer {
    fn define(&mut self, name: &str) -> Var {
        let n = self.counters.entry(name.to_string()).or_insert(0);
        *n += 1;
        let v = Var::versioned(name, *n);
        self.stacks.entry(name.to_string()).or_default().push(v.clone());
        v
    }

    fn current(&self, name: &str) -> Option<Var> {
        self.stacks.get(name).and_then(|s| s.last().cloned())
    }
}

/// The renamed program with phi nodes at the head of each block.
pub fn ssa_listing(ssa: &SsaProgram) -> String {
    let mut out = String::new();
    for b in &ssa.cfg.blocks {
        let _ = writeln!(out, "b{} (depth {}):", b.id, ssa.cfg.loop_depth[b.id]);
        for phi in &ssa.phis[b.id] {
            let _ = writeln!(out, "    {phi}");
        }
        for inst in &b.insts {
            let _ = writeln!(out, "    {inst}");
        }
        let _ = writeln!(out, "    {}", b.term);
    }
    if !ssa.maybe_undef.is_empty() {
        let names: Vec<String> = ssa.maybe_undef.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "; maybe undefined: {}", names.join(", "));
    }
    out
}

/// Textual dump of dominators and frontiers, one block per line.
pub fn dominance_report(ssa: &SsaProgram) -> String {
    let mut out = String::new();
    for b in 0..ssa.cfg.len() {
        let _ = writeln!(
            out,
            "b{b}: idom={} df={:?}",
            ssa.dom.idom[b].map_or("-".to_string(), |d| format!("b{d}")),
            ssa.frontiers[b]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::build_cfg;
    use crate::program::build::*;
    use crate::program::{CmpOp, SeqNode, SeqProgram};

    fn ssa_of(body: Vec<SeqNode>) -> Result<SsaProgram, SsaError> {
        let states = ["A", "B"].iter().map(|s| state(s, 10)).collect();
        let p = SeqProgram::new(two_board_config(), states, body);
        construct_ssa(&build_cfg(&p).unwrap())
    }

    #[test]
    fn diamond_dominators_and_frontier() {
        let ssa = ssa_of(vec![
            assign("x", konst(1)),
            if_(
                cond(v("x"), CmpOp::LT, c(3)),
                vec![assign("x", konst(2))],
                Some(vec![assign("x", konst(3))]),
            ),
            assign("y", var("x")),
        ])
        .unwrap();
        // b0 branch, b1 then, b2 else, b3 merge, b4 halt
        assert_eq!(ssa.dom.idom, vec![None, Some(0), Some(0), Some(0), Some(3)]);
        assert_eq!(ssa.frontiers[1], BTreeSet::from([3]));
        assert_eq!(ssa.frontiers[2], BTreeSet::from([3]));
        assert_eq!(ssa.phis[3].len(), 1);
        assert_eq!(ssa.phis[3][0].dst, Var::versioned("x", 4));
        ssa.verify().unwrap();
    }

    #[test]
    fn loop_counter_gets_header_phi() {
        let ssa = ssa_of(vec![repeat(3, vec![play("A")])]).unwrap();
        assert_eq!(ssa.phis[1].len(), 1);
        let phi = &ssa.phis[1][0];
        assert_eq!(phi.dst.name, "%loop0");
        assert!(phi.args.iter().all(|(_, a)| a.is_some()));
        // counter init is a constant; the phi and the increment count
        assert_eq!(ssa.var_count(), 2);
        ssa.verify().unwrap();
    }

    #[test]
    fn straight_line_has_no_phis() {
        let ssa = ssa_of(vec![assign("x", konst(1)), assign("x", add(var("x"), konst(1)))]).unwrap();
        assert_eq!(ssa.phi_count(), 0);
        let outputs = match &ssa.cfg.blocks.last().unwrap().term {
            Terminator::Halt { outputs } => outputs.clone(),
            _ => panic!(),
        };
        assert_eq!(outputs, vec![("x".into(), Var::versioned("x", 2))]);
    }

    #[test]
    fn use_before_definition_is_rejected_with_location() {
        let err = ssa_of(vec![assign("y", var("x"))]).unwrap_err();
        assert!(matches!(err, SsaError::UseBeforeDef { ref var, loc: Some(_) } if var == "x"));
    }

    #[test]
    fn one_armed_definition_is_maybe_undefined() {
        let err = ssa_of(vec![
            assign("c", konst(0)),
            if_(cond(v("c"), CmpOp::EQ, c(0)), vec![assign("x", konst(1))], None),
            assign("y", var("x")),
        ])
        .unwrap_err();
        assert!(matches!(err, SsaError::UseBeforeDef { ref var, .. } if var == "x"));
    }

    #[test]
    fn unused_maybe_undefined_value_is_dropped_from_outputs() {
        let ssa = ssa_of(vec![
            assign("c", konst(0)),
            if_(cond(v("c"), CmpOp::EQ, c(0)), vec![assign("x", konst(1))], None),
        ])
        .unwrap();
        let Terminator::Halt { outputs } = &ssa.cfg.blocks.last().unwrap().term else {
            panic!()
        };
        assert_eq!(outputs.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), vec!["c"]);
    }
}
