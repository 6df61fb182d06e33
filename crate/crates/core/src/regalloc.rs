//! Graph-coloring register allocation with optimistic spilling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use crate::ir::{Cfg, Inst, InstKind, Terminator, Var};
use crate::liveness::{analyze, build_interference, InterferenceGraph};

pub type Reg = u8;

/// Register file layout: `x0` reads as zero, the highest register is the
/// code generator's scratch, and the rest are allocatable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegFile {
    pub total: u8,
}

impl Default for RegFile {
    fn default() -> Self {
        RegFile { total: 8 }
    }
}

impl RegFile {
    pub const ZERO: Reg = 0;
    pub const MIN: u8 = 4;
    pub const MAX: u8 = 32;

    pub fn new(total: u8) -> Option<Self> {
        (Self::MIN..=Self::MAX).contains(&total).then_some(RegFile { total })
    }

    pub fn scratch(self) -> Reg {
        self.total - 1
    }

    pub fn colors(self) -> usize {
        self.total as usize - 2
    }

    pub fn allocatable(self) -> impl Iterator<Item = Reg> {
        1..self.total - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Reg(Reg),
    Slot(u32),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Reg(r) => write!(f, "x{r}"),
            Location::Slot(s) => write!(f, "[{s}]"),
        }
    }
}

pub const MAX_ROUNDS: u32 = 8;
pub const MAX_FRAME_SLOTS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AllocError {
    #[error("spill frame needs {0} slots, more than the {MAX_FRAME_SLOTS} available")]
    FrameOverflow(u32),
    #[error("allocation did not converge after {0} rounds")]
    NoProgress(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    /// The program with spill loads and stores inserted.
    pub cfg: Cfg,
    pub regs: RegFile,
    pub assignment: BTreeMap<Var, Reg>,
    pub slots: BTreeMap<Var, u32>,
    pub frame_slots: u32,
    pub rounds: u32,
    pub graph: InterferenceGraph,
}

impl Allocation {
    pub fn spill_count(&self) -> usize {
        self.slots.len()
    }

    pub fn location(&self, v: &Var) -> Option<Location> {
        self.slots
            .get(v)
            .map(|s| Location::Slot(*s))
            .or_else(|| self.assignment.get(v).map(|r| Location::Reg(*r)))
    }

    /// Where each observable variable ends up at halt.
    pub fn exit_map(&self) -> BTreeMap<String, Location> {
        let mut out = BTreeMap::new();
        for b in &self.cfg.blocks {
            if let Terminator::Halt { outputs } = &b.term {
                for (name, v) in outputs {
                    if let Some(loc) = self.location(v) {
                        out.insert(name.clone(), loc);
                    }
                }
            }
        }
        out
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "registers: {} ({} allocatable), rounds: {}, spilled: {}, frame slots: {}, max pressure: {}",
            self.regs.total,
            self.regs.colors(),
            self.rounds,
            self.spill_count(),
            self.frame_slots,
            self.graph.max_pressure
        );
        for (v, r) in &self.assignment {
            let _ = writeln!(out, "{v} -> x{r}");
        }
        for (v, s) in &self.slots {
            let _ = writeln!(out, "{v} -> slot {s}");
        }
        out
    }
}

/// Result of one coloring attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Coloring {
    Colored(BTreeMap<Var, Reg>),
    Spill(Vec<Var>),
}

/// Optimistic coloring: simplify nodes of insignificant degree, push
/// cheapest-per-degree candidates when stuck, and spill only nodes that find
/// no free color on the way back.
pub fn color(g: &InterferenceGraph, regs: RegFile) -> Coloring {
    let k = regs.colors();
    let mut degree: BTreeMap<&Var, usize> = g.adj.iter().map(|(v, n)| (v, n.len())).collect();
    let mut stack: Vec<&Var> = Vec::new();
    while !degree.is_empty() {
        let low = degree
            .iter()
            .filter(|(_, d)| **d < k)
            .min_by_key(|(v, d)| (**d, **v))
            .map(|(v, _)| *v);
        let pick = low.unwrap_or_else(|| {
            degree
                .iter()
                .min_by(|(a, da), (b, db)| {
                    let ca = cost(g, a) / (**da).max(1) as f64;
                    let cb = cost(g, b) / (**db).max(1) as f64;
                    ca.total_cmp(&cb).then_with(|| a.cmp(b))
                })
                .map(|(v, _)| *v)
                .expect("non-empty")
        });
        degree.remove(pick);
        for n in &g.adj[pick] {
            if let Some(d) = degree.get_mut(n) {
                *d -= 1;
            }
        }
        stack.push(pick);
    }
    let mut partners: BTreeMap<&Var, Vec<&Var>> = BTreeMap::new();
    for (a, b) in &g.moves {
        partners.entry(a).or_default().push(b);
        partners.entry(b).or_default().push(a);
    }
    let mut assignment: BTreeMap<Var, Reg> = BTreeMap::new();
    let mut spills = Vec::new();
    while let Some(v) = stack.pop() {
        let taken: BTreeSet<Reg> = g.adj[v].iter().filter_map(|n| assignment.get(n).copied()).collect();
        let preferred = partners
            .get(v)
            .into_iter()
            .flatten()
            .filter_map(|p| assignment.get(*p).copied())
            .find(|r| !taken.contains(r));
        match preferred.or_else(|| regs.allocatable().find(|r| !taken.contains(r))) {
            Some(r) => {
                assignment.insert(v.clone(), r);
            }
            None => spills.push(v.clone()),
        }
    }
    if spills.is_empty() {
        Coloring::Colored(assignment)
    } else {
        spills.sort();
        Coloring::Spill(spills)
    }
}

fn cost(g: &InterferenceGraph, v: &Var) -> f64 {
    if v.name.starts_with("%sp") {
        f64::INFINITY
    } else {
        g.spill_cost.get(v).copied().unwrap_or(0.0)
    }
}

/// Rewrites every occurrence of a spilled value: a fresh temporary is
/// loaded before each using instruction and stored after each defining
/// one. Halt outputs are read from the slot directly.
pub fn insert_spill_code(cfg: &Cfg, slots: &BTreeMap<Var, u32>, temps: &mut u32) -> Cfg {
    let mut out = cfg.clone();
    let fresh = |temps: &mut u32| {
        let v = Var::new(format!("%sp{temps}"));
        *temps += 1;
        v
    };
    for b in &mut out.blocks {
        let mut insts = Vec::with_capacity(b.insts.len());
        for mut inst in std::mem::take(&mut b.insts) {
            let loc = inst.loc.clone();
            let mut loaded: BTreeMap<Var, Var> = BTreeMap::new();
            for u in inst.uses_mut() {
                if let Some(&slot) = slots.get(u) {
                    let t = loaded.entry(u.clone()).or_insert_with(|| {
                        let t = fresh(temps);
                        insts.push(Inst::new(InstKind::Load { dst: t.clone(), slot }, loc.clone()));
                        t
                    });
                    *u = t.clone();
                }
            }
            let mut store = None;
            if let Some(d) = inst.def_mut() {
                if let Some(&slot) = slots.get(d) {
                    let t = fresh(temps);
                    *d = t.clone();
                    store = Some(Inst::new(InstKind::Store { src: t, slot }, loc));
                }
            }
            insts.push(inst);
            insts.extend(store);
        }
        if !matches!(b.term, Terminator::Halt { .. }) {
            let mut loaded: BTreeMap<Var, Var> = BTreeMap::new();
            for u in b.term.uses_mut() {
                if let Some(&slot) = slots.get(u) {
                    let t = loaded.entry(u.clone()).or_insert_with(|| {
                        let t = fresh(temps);
                        insts.push(Inst::new(InstKind::Load { dst: t.clone(), slot }, b.term_loc.clone()));
                        t
                    });
                    *u = t.clone();
                }
            }
        }
        b.insts = insts;
    }
    out
}

/// Iterates coloring and spill-code insertion until every value has a
/// register or a slot.
pub fn allocate(cfg: &Cfg, regs: RegFile) -> Result<Allocation, AllocError> {
    let mut current = cfg.clone();
    let mut slots: BTreeMap<Var, u32> = BTreeMap::new();
    let mut temps = 0u32;
    for round in 1..=MAX_ROUNDS {
        let live = analyze(&current);
        let mut graph = build_interference(&current, &live);
        // spilled values that still appear only as halt outputs live in memory
        for v in slots.keys() {
            graph.adj.remove(v);
        }
        for ns in graph.adj.values_mut() {
            ns.retain(|n| !slots.contains_key(n));
        }
        match color(&graph, regs) {
            Coloring::Colored(assignment) => {
                return Ok(Allocation {
                    cfg: current,
                    regs,
                    assignment,
                    frame_slots: slots.len() as u32,
                    slots,
                    rounds: round,
                    graph,
                });
            }
            Coloring::Spill(spills) => {
                let mut fresh = BTreeMap::new();
                for v in spills {
                    if v.name.starts_with("%sp") {
                        return Err(AllocError::NoProgress(round));
                    }
                    let next = slots.len() as u32;
                    slots.entry(v.clone()).or_insert(next);
                    fresh.insert(v.clone(), slots[&v]);
                }
                if slots.len() as u32 > MAX_FRAME_SLOTS {
                    return Err(AllocError::FrameOverflow(slots.len() as u32));
                }
                current = insert_spill_code(&current, &fresh, &mut temps);
            }
        }
    }
    Err(AllocError::NoProgress(MAX_ROUNDS))
}

/// Checks that no two interfering values share a register.
pub fn verify_coloring(g: &InterferenceGraph, assignment: &BTreeMap<Var, Reg>) -> Result<(), String> {
    for (a, ns) in &g.adj {
        let ra = assignment.get(a).ok_or_else(|| format!("{a} has no register"))?;
        for b in ns {
            if assignment.get(b) == Some(ra) {
                return Err(format!("{a} and {b} interfere but share x{ra}"));
            }
        }
    }
    Ok(())
}
