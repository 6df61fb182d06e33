//! Out-of-SSA translation, liveness analysis and the interference graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::ir::{BasicBlock, BlockId, Cfg, Inst, InstKind, Operand, Rvalue, Terminator, Var};
use crate::ssa::SsaProgram;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("phi copies on critical edge b{from} -> b{to} need edge splitting")]
pub struct CriticalEdgeError {
    pub from: BlockId,
    pub to: BlockId,
}

/// Replaces phi nodes by copies on incoming edges. Critical edges that
/// carry copies are split unless `split_critical_edges` is off, in which
/// case they are an error. Phis whose value is never used emit no copies.
pub fn destruct_ssa(ssa: &SsaProgram, split_critical_edges: bool) -> Result<Cfg, CriticalEdgeError> {
    let mut cfg = ssa.cfg.clone();
    let preds = cfg.predecessors();
    let used = used_values(ssa);
    let mut temps = 0u32;
    // (pred, succ) -> split block id
    let mut splits: Vec<(BlockId, BlockId)> = Vec::new();
    let mut split_depth: Vec<u32> = Vec::new();

    for b in 0..ssa.cfg.len() {
        let phis: Vec<_> = ssa.phis[b].iter().filter(|p| used.contains(&p.dst)).collect();
        if phis.is_empty() {
            continue;
        }
        for &p in &preds[b] {
            let copies: Vec<(Var, Var)> = phis
                .iter()
                .filter_map(|phi| {
                    let arg = phi.args.iter().find(|(q, _)| *q == p)?.1.clone()?;
                    Some((phi.dst.clone(), arg))
                })
                .collect();
            let seq = sequentialize(&copies, &mut temps);
            if seq.is_empty() {
                continue;
            }
            let critical = cfg.successors(p).len() > 1 && preds[b].len() > 1;
            let target = if critical {
                if !split_critical_edges {
                    return Err(CriticalEdgeError { from: p, to: b });
                }
                let id = cfg.blocks.len();
                cfg.blocks.push(BasicBlock {
                    id,
                    insts: Vec::new(),
                    term: Terminator::Jump(b),
                    term_loc: None,
                    cond_entry: false,
                });
                cfg.loop_depth.push(ssa.cfg.loop_depth[p].min(ssa.cfg.loop_depth[b]));
                cfg.blocks[p].term.retarget(b, id);
                splits.push((id, b));
                split_depth.push(0);
                id
            } else {
                p
            };
            let loc = cfg.blocks[p].term_loc.clone();
            cfg.blocks[target].insts.extend(seq.into_iter().map(|(dst, src)| {
                Inst::new(
                    InstKind::Assign {
                        dst,
                        value: Rvalue::Use(Operand::Var(src)),
                    },
                    loc.clone(),
                )
            }));
        }
    }
    if splits.is_empty() {
        return Ok(cfg);
    }
    let mut order = Vec::with_capacity(cfg.len());
    for b in 0..ssa.cfg.len() {
        order.extend(splits.iter().filter(|(_, s)| *s == b).map(|(n, _)| *n));
        order.push(b);
    }
    Ok(cfg.reorder(&order))
}

fn used_values(ssa: &SsaProgram) -> BTreeSet<Var> {
    let mut used = BTreeSet::new();
    for b in &ssa.cfg.blocks {
        for inst in &b.insts {
            used.extend(inst.uses().into_iter().cloned());
        }
        used.extend(b.term.uses().into_iter().cloned());
    }
    // phi arguments keep other phis alive only if those are themselves used
    let mut changed = true;
    while changed {
        changed = false;
        for phi in ssa.phis.iter().flatten() {
            if used.contains(&phi.dst) {
                for v in phi.args.iter().filter_map(|(_, a)| a.as_ref()) {
                    changed |= used.insert(v.clone());
                }
            }
        }
    }
    used
}

/// Orders a parallel copy `dst_i <- src_i` (all at once) into sequential
/// copies, breaking cycles with fresh `%pcN` temporaries.
pub fn sequentialize(copies: &[(Var, Var)], temps: &mut u32) -> Vec<(Var, Var)> {
    let mut pending: Vec<(Var, Var)> = copies.iter().filter(|(d, s)| d != s).cloned().collect();
    let mut out = Vec::new();
    while !pending.is_empty() {
        let ready = pending
            .iter()
            .position(|(d, _)| !pending.iter().any(|(_, s)| s == d));
        match ready {
            Some(i) => out.push(pending.remove(i)),
            None => {
                let blocked = pending[0].0.clone();
                let tmp = Var::new(format!("%pc{temps}"));
                *temps += 1;
                out.push((tmp.clone(), blocked.clone()));
                for (_, s) in &mut pending {
                    if *s == blocked {
                        *s = tmp.clone();
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Liveness {
    pub live_in: Vec<BTreeSet<Var>>,
    pub live_out: Vec<BTreeSet<Var>>,
}

/// Backward dataflow to a fixed point.
pub fn analyze(cfg: &Cfg) -> Liveness {
    let n = cfg.len();
    let mut gen = vec![BTreeSet::new(); n];
    let mut kill = vec![BTreeSet::new(); n];
    for b in &cfg.blocks {
        let (g, k) = (&mut gen[b.id], &mut kill[b.id]);
        for inst in &b.insts {
            for u in inst.uses() {
                if !k.contains(u) {
                    g.insert(u.clone());
                }
            }
            if let Some(d) = inst.def() {
                k.insert(d.clone());
            }
        }
        for u in b.term.uses() {
            if !k.contains(u) {
                g.insert(u.clone());
            }
        }
    }
    let mut live_in: Vec<BTreeSet<Var>> = vec![BTreeSet::new(); n];
    let mut live_out: Vec<BTreeSet<Var>> = vec![BTreeSet::new(); n];
    let mut order = cfg.reverse_postorder();
    order.reverse();
    let mut changed = true;
    while changed {
        changed = false;
        for &b in &order {
            let mut out = BTreeSet::new();
            for s in cfg.successors(b) {
                out.extend(live_in[s].iter().cloned());
            }
            let mut inn: BTreeSet<Var> = out.difference(&kill[b]).cloned().collect();
            inn.extend(gen[b].iter().cloned());
            if inn != live_in[b] || out != live_out[b] {
                live_in[b] = inn;
                live_out[b] = out;
                changed = true;
            }
        }
    }
    Liveness { live_in, live_out }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceGraph {
    pub adj: BTreeMap<Var, BTreeSet<Var>>,
    /// Copy-related pairs, for biased coloring.
    pub moves: Vec<(Var, Var)>,
    /// Sum of 10^loop_depth over every use and definition.
    pub spill_cost: BTreeMap<Var, f64>,
    /// Largest number of simultaneously live values.
    pub max_pressure: usize,
}

impl InterferenceGraph {
    pub fn nodes(&self) -> impl Iterator<Item = &Var> {
        self.adj.keys()
    }

    pub fn interferes(&self, a: &Var, b: &Var) -> bool {
        self.adj.get(a).is_some_and(|n| n.contains(b))
    }

    pub fn degree(&self, v: &Var) -> usize {
        self.adj.get(v).map_or(0, BTreeSet::len)
    }

    pub fn edge_count(&self) -> usize {
        self.adj.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    fn add_node(&mut self, v: &Var) {
        self.adj.entry(v.clone()).or_default();
    }

    fn add_edge(&mut self, a: &Var, b: &Var) {
        if a != b {
            self.adj.entry(a.clone()).or_default().insert(b.clone());
            self.adj.entry(b.clone()).or_default().insert(a.clone());
        }
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("graph interference {\n");
        for v in self.nodes() {
            let _ = writeln!(out, "  \"{v}\";");
        }
        for (a, ns) in &self.adj {
            for b in ns.iter().filter(|b| a < *b) {
                let _ = writeln!(out, "  \"{a}\" -- \"{b}\";");
            }
        }
        for (a, b) in &self.moves {
            let _ = writeln!(out, "  \"{a}\" -- \"{b}\" [style=dotted];");
        }
        out.push_str("}\n");
        out
    }
}

/// A definition interferes with every value live right after it.
pub fn build_interference(cfg: &Cfg, live: &Liveness) -> InterferenceGraph {
    let mut g = InterferenceGraph {
        adj: BTreeMap::new(),
        moves: Vec::new(),
        spill_cost: BTreeMap::new(),
        max_pressure: 0,
    };
    for b in &cfg.blocks {
        let weight = 10f64.powi(cfg.loop_depth[b.id] as i32);
        let mut now: BTreeSet<Var> = live.live_out[b.id].clone();
        for u in b.term.uses() {
            now.insert(u.clone());
            *g.spill_cost.entry(u.clone()).or_default() += weight;
        }
        g.max_pressure = g.max_pressure.max(now.len());
        for v in &now {
            g.add_node(v);
        }
        for inst in b.insts.iter().rev() {
            if let Some(d) = inst.def() {
                g.add_node(d);
                for l in now.clone().iter() {
                    g.add_edge(d, l);
                }
                now.remove(d);
                *g.spill_cost.entry(d.clone()).or_default() += weight;
                if let Some((dst, src)) = inst.as_copy() {
                    g.moves.push((dst.clone(), src.clone()));
                }
            }
            for u in inst.uses() {
                g.add_node(u);
                now.insert(u.clone());
                *g.spill_cost.entry(u.clone()).or_default() += weight;
            }
            g.max_pressure = g.max_pressure.max(now.len());
        }
    }
    g
}

/// Text dump of per-block live sets.
pub fn liveness_report(cfg: &Cfg, live: &Liveness) -> String {
    let fmt_set = |s: &BTreeSet<Var>| s.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
    let mut out = String::new();
    for b in 0..cfg.len() {
        let _ = writeln!(out, "b{b}: in {{{}}} out {{{}}}", fmt_set(&live.live_in[b]), fmt_set(&live.live_out[b]));
    }
    out
}
