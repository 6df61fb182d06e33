//! Tick-level simulation of several boards running their control programs
//! against a shared step timeline.
//!
//! Each board has a processor that issues instructions and a hardware
//! sequencer that plays queued step-table entries back to back. The
//! processors run ahead of the hardware and only meet at barriers. After a
//! barrier the counter board latches a photon count and broadcasts it over
//! the star bus; every other board is blocked until that broadcast lands.

mod analysis;
mod detection;

pub use analysis::{assert_lockstep, check_protocol, measure_feedback_latency, timeline_span, LatencyRecord, LockstepViolation, NoFeedbackCycle};
pub use detection::DetectionScript;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::codegen::BoardProgram;
use crate::pipeline::Compiled;
use crate::isa::{Class, Instr};
use crate::regalloc::{Location, RegFile};
use crate::steptable::BoardTable;

/// Data memory per board, in words.
pub const DATA_WORDS: usize = 512;

/// Instruction costs per timing class, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstrCosts {
    pub alu: u64,
    pub branch: u64,
    pub jump: u64,
    pub mem: u64,
    pub step: u64,
    pub barrier: u64,
    /// Counter latch, broadcast and receive.
    pub coord: u64,
    pub halt: u64,
    pub waithost: u64,
}

impl InstrCosts {
    pub fn of(&self, class: Class) -> u64 {
        match class {
            Class::Alu => self.alu,
            Class::Branch => self.branch,
            Class::Jump => self.jump,
            Class::Mem => self.mem,
            Class::Step => self.step,
            Class::Barrier => self.barrier,
            Class::Coord => self.coord,
            Class::Halt => self.halt,
            Class::WaitHost => self.waithost,
        }
    }
}

/// Fields missing from a JSON timing file take their default values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingModel {
    pub tick_ns: u64,
    pub instr_cost: InstrCosts,
    pub readcnt_delay: u64,
    pub bcast_delay: u64,
    pub barrier_release: u64,
    pub waithost_resume: u64,
    pub queue_depth: usize,
}

impl Default for InstrCosts {
    fn default() -> Self {
        InstrCosts {
            alu: 1,
            branch: 1,
            jump: 1,
            mem: 1,
            step: 1,
            barrier: 1,
            coord: 42,
            halt: 1,
            waithost: 1,
        }
    }
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel {
            tick_ns: 4,
            instr_cost: InstrCosts::default(),
            readcnt_delay: 20,
            bcast_delay: 22,
            barrier_release: 2,
            waithost_resume: 250,
            queue_depth: 256,
        }
    }
}

impl TimingModel {
    /// Electronic delays must each stay below 100 ns.
    pub fn validate(&self) -> Result<(), String> {
        if self.tick_ns == 0 {
            return Err("tick_ns must be positive".into());
        }
        if self.readcnt_delay * self.tick_ns >= 100 {
            return Err(format!("readcnt delay {} ns is not below 100 ns", self.readcnt_delay * self.tick_ns));
        }
        if self.bcast_delay * self.tick_ns >= 100 {
            return Err(format!("broadcast delay {} ns is not below 100 ns", self.bcast_delay * self.tick_ns));
        }
        let c = &self.instr_cost;
        if [c.alu, c.branch, c.jump, c.mem, c.step, c.barrier, c.coord, c.halt, c.waithost].contains(&0) {
            return Err("instruction costs must be at least one tick".into());
        }
        if self.queue_depth == 0 {
            return Err("queue depth must be positive".into());
        }
        Ok(())
    }

    /// All instruction costs multiplied by `k`.
    pub fn scale_instr_costs(mut self, k: u64) -> Self {
        let c = &mut self.instr_cost;
        for v in [
            &mut c.alu,
            &mut c.branch,
            &mut c.jump,
            &mut c.mem,
            &mut c.step,
            &mut c.barrier,
            &mut c.coord,
            &mut c.halt,
            &mut c.waithost,
        ] {
            *v *= k;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Exec { pc: usize, op: String },
    StepStart { ordinal: u64, entry: u32, feedback: bool },
    StepEnd { ordinal: u64, entry: u32 },
    BarrierWait { sync: u64 },
    BarrierRelease { sync: u64 },
    Bcast { sync: u64, value: i32 },
    Recv { sync: u64, value: i32 },
    WaitHost { tag: u32 },
    Resume,
    Halt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub tick: u64,
    pub board: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// One barrier/readout/broadcast cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReadCycle {
    pub id: u64,
    pub count: i32,
    /// End of the last step played before the barrier.
    pub window_close_tick: u64,
    pub release_tick: Option<u64>,
    /// Start of the first step after the cycle, if that step is the
    /// response of a feedback branch.
    pub response_start_tick: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimTrace {
    pub tick_ns: u64,
    pub boards: Vec<String>,
    pub events: Vec<Event>,
    pub reads: Vec<ReadCycle>,
    pub end_tick: u64,
    /// Final values of observable variables, per board.
    pub final_vars: BTreeMap<String, BTreeMap<String, i32>>,
}

impl SimTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Final variables as seen by the first board; all boards agree when
    /// [`SimTrace::boards_agree`] holds.
    pub fn vars(&self) -> BTreeMap<String, i32> {
        self.boards
            .first()
            .and_then(|b| self.final_vars.get(b))
            .cloned()
            .unwrap_or_default()
    }

    pub fn boards_agree(&self) -> bool {
        let mut it = self.final_vars.values();
        match it.next() {
            Some(first) => it.all(|v| v == first),
            None => true,
        }
    }

    pub fn steps_started(&self, board: &str) -> Vec<u32> {
        self.events
            .iter()
            .filter(|e| e.board == board)
            .filter_map(|e| match e.kind {
                EventKind::StepStart { entry, .. } => Some(entry),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("deadlock at tick {tick}: {detail}")]
    Deadlock { tick: u64, detail: String },
    #[error("board {board}: step index {index} outside table of {len} entries")]
    StepIndex { board: String, index: u32, len: usize },
    #[error("simulation exceeded {0} ticks")]
    MaxTicksExceeded(u64),
    #[error("detection script exhausted after {0} counts")]
    DetectionScriptExhausted(u64),
    #[error("board {board}: invalid instruction word at pc {pc}")]
    BadInstruction { board: String, pc: usize },
    #[error("board {board}: data access at byte {addr} out of range")]
    Memory { board: String, addr: i64 },
    #[error("board {board}: receive with no broadcast pending")]
    Protocol { board: String },
    #[error("invalid timing model: {0}")]
    Timing(String),
    #[error("{0}")]
    Setup(String),
}

/// What one board runs: its program and its step table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimBoard {
    pub board_id: String,
    pub counter_board: bool,
    pub words: Vec<u32>,
    pub feedback: Vec<bool>,
    pub data: Vec<i32>,
    pub regs: u8,
    pub exit_map: BTreeMap<String, Location>,
    pub durations: Vec<u32>,
}

impl SimBoard {
    pub fn new(program: &BoardProgram, table: &BoardTable) -> Self {
        SimBoard {
            board_id: program.board_id.clone(),
            counter_board: program.counter_board,
            words: program.words.clone(),
            feedback: program.lines.iter().map(|l| l.feedback).collect(),
            data: program.data.clone(),
            regs: program.regs,
            exit_map: program.exit_map.clone(),
            durations: table.entries.iter().map(|e| e.duration_ticks()).collect(),
        }
    }

    /// Pairs programs with tables by board id.
    pub fn from_bundle(programs: &[BoardProgram], tables: &[BoardTable]) -> Result<Vec<SimBoard>, SimError> {
        programs
            .iter()
            .map(|p| {
                let t = tables
                    .iter()
                    .find(|t| t.board_id == p.board_id)
                    .ok_or_else(|| SimError::Setup(format!("no step table for board {}", p.board_id)))?;
                Ok(SimBoard::new(p, t))
            })
            .collect()
    }
}

/// Simulates a compiled bundle.
pub fn run_compiled(c: &Compiled, tm: &TimingModel, detection: &mut DetectionScript, max_ticks: u64) -> Result<SimTrace, SimError> {
    let boards = SimBoard::from_bundle(&c.boards, &c.tables.boards)?;
    run(&boards, tm, detection, max_ticks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Running,
    Barrier { ready: u64 },
    AwaitBcast,
    WaitHost { ready: u64, tag: u32 },
    Halted,
}

struct Queued {
    entry: u32,
    avail: u64,
    feedback: bool,
}

struct Playing {
    ordinal: u64,
    entry: u32,
    end: u64,
}

struct Board<'a> {
    spec: &'a SimBoard,
    pc: usize,
    regs: Vec<i32>,
    mem: Vec<i32>,
    status: Status,
    next_issue: u64,
    queue: VecDeque<Queued>,
    playing: Option<Playing>,
    hw_free: u64,
    last_step_end: u64,
    ordinal: u64,
    latched: Option<i32>,
}

impl Board<'_> {
    fn drained(&self, t: u64) -> bool {
        self.queue.is_empty() && self.playing.is_none() && self.hw_free <= t
    }

    fn reg(&self, r: u8) -> i32 {
        self.regs[r as usize]
    }

    fn set(&mut self, r: u8, v: i32) {
        if r != RegFile::ZERO {
            self.regs[r as usize] = v;
        }
    }

    fn mem_index(&self, base: u8, imm: i32) -> Result<usize, SimError> {
        let addr = self.reg(base) as i64 + imm as i64;
        if addr < 0 || addr % 4 != 0 || addr as usize / 4 >= self.mem.len() {
            return Err(SimError::Memory {
                board: self.spec.board_id.clone(),
                addr,
            });
        }
        Ok(addr as usize / 4)
    }
}

struct Sim<'a> {
    tm: TimingModel,
    boards: Vec<Board<'a>>,
    events: Vec<(u64, usize, EventKind)>,
    reads: Vec<ReadCycle>,
    release: Option<(u64, i32)>,
    sync: u64,
    awaiting_response: Option<usize>,
    detection: &'a mut DetectionScript,
    consumed: u64,
}

/// Runs all boards until every processor has halted and every queued step
/// has played.
pub fn run(boards: &[SimBoard], tm: &TimingModel, detection: &mut DetectionScript, max_ticks: u64) -> Result<SimTrace, SimError> {
    tm.validate().map_err(SimError::Timing)?;
    if boards.iter().filter(|b| b.counter_board).count() > 1 {
        return Err(SimError::Setup("more than one counter board".into()));
    }
    let mut sim = Sim {
        tm: *tm,
        boards: boards
            .iter()
            .map(|spec| {
                let mut mem = spec.data.clone();
                mem.resize(DATA_WORDS.max(mem.len()), 0);
                Board {
                    spec,
                    pc: 0,
                    regs: vec![0; spec.regs.max(1) as usize],
                    mem,
                    status: Status::Running,
                    next_issue: 0,
                    queue: VecDeque::new(),
                    playing: None,
                    hw_free: 0,
                    last_step_end: 0,
                    ordinal: 0,
                    latched: None,
                }
            })
            .collect(),
        events: Vec::new(),
        reads: Vec::new(),
        release: None,
        sync: 0,
        awaiting_response: None,
        detection,
        consumed: 0,
    };
    let mut t = 0u64;
    loop {
        sim.hardware(t)?;
        sim.deliver(t);
        sim.barriers(t);
        sim.host_waits(t);
        for i in 0..sim.boards.len() {
            sim.processor(i, t)?;
        }
        match sim.next_tick(t)? {
            Some(next) => {
                if next > max_ticks {
                    return Err(SimError::MaxTicksExceeded(max_ticks));
                }
                t = next;
            }
            None => break,
        }
    }
    let end_tick = t;
    let mut events: Vec<(u64, usize, usize, EventKind)> = sim
        .events
        .into_iter()
        .enumerate()
        .map(|(seq, (tick, b, k))| (tick, b, seq, k))
        .collect();
    events.sort_by_key(|(tick, b, seq, _)| (*tick, *b, *seq));
    let mut final_vars = BTreeMap::new();
    for b in &sim.boards {
        let mut vars = BTreeMap::new();
        for (name, loc) in &b.spec.exit_map {
            let v = match loc {
                Location::Reg(r) => b.reg(*r),
                Location::Slot(s) => b.mem.get(*s as usize).copied().unwrap_or(0),
            };
            vars.insert(name.clone(), v);
        }
        final_vars.insert(b.spec.board_id.clone(), vars);
    }
    Ok(SimTrace {
        tick_ns: tm.tick_ns,
        boards: boards.iter().map(|b| b.board_id.clone()).collect(),
        events: events
            .into_iter()
            .map(|(tick, b, _, kind)| Event {
                tick,
                board: boards[b].board_id.clone(),
                kind,
            })
            .collect(),
        reads: sim.reads,
        end_tick,
        final_vars,
    })
}

impl Sim<'_> {
    fn event(&mut self, t: u64, board: usize, kind: EventKind) {
        self.events.push((t, board, kind));
    }

    fn hardware(&mut self, t: u64) -> Result<(), SimError> {
        for i in 0..self.boards.len() {
            let b = &mut self.boards[i];
            if let Some(p) = &b.playing {
                if p.end == t {
                    let (ordinal, entry) = (p.ordinal, p.entry);
                    b.playing = None;
                    b.last_step_end = t;
                    self.event(t, i, EventKind::StepEnd { ordinal, entry });
                }
            }
            let b = &mut self.boards[i];
            if b.playing.is_none() && b.hw_free <= t && b.queue.front().is_some_and(|q| q.avail <= t) {
                let q = b.queue.pop_front().expect("front");
                let len = b.spec.durations.len();
                let dur = *b.spec.durations.get(q.entry as usize).ok_or_else(|| SimError::StepIndex {
                    board: b.spec.board_id.clone(),
                    index: q.entry,
                    len,
                })? as u64;
                let ordinal = b.ordinal;
                b.ordinal += 1;
                b.playing = Some(Playing {
                    ordinal,
                    entry: q.entry,
                    end: t + dur,
                });
                b.hw_free = t + dur;
                self.event(
                    t,
                    i,
                    EventKind::StepStart {
                        ordinal,
                        entry: q.entry,
                        feedback: q.feedback,
                    },
                );
                if let Some(r) = self.awaiting_response.take() {
                    if q.feedback {
                        self.reads[r].response_start_tick = Some(t);
                    }
                }
            }
        }
        Ok(())
    }

    fn deliver(&mut self, t: u64) {
        let Some((at, value)) = self.release else { return };
        if at != t {
            return;
        }
        self.release = None;
        let sync = self.sync;
        if let Some(r) = self.reads.last_mut() {
            r.release_tick = Some(t);
        }
        let counter = self.boards.iter().position(|b| b.spec.counter_board);
        if let Some(c) = counter {
            self.event(t, c, EventKind::Bcast { sync, value });
        }
        for (i, b) in self.boards.iter_mut().enumerate() {
            if b.status == Status::AwaitBcast {
                b.status = Status::Running;
                b.next_issue = t;
                b.latched = Some(value);
                self.events.push((t, i, EventKind::Resume));
            }
        }
    }

    fn barriers(&mut self, t: u64) {
        let live: Vec<usize> = (0..self.boards.len()).filter(|&i| self.boards[i].status != Status::Halted).collect();
        if live.is_empty() {
            return;
        }
        let all_arrived = live.iter().all(|&i| {
            let b = &self.boards[i];
            matches!(b.status, Status::Barrier { ready } if ready <= t) && b.drained(t)
        });
        if !all_arrived {
            return;
        }
        self.sync += 1;
        let sync = self.sync;
        let close = live.iter().map(|&i| self.boards[i].last_step_end).max().unwrap_or(0);
        for &i in &live {
            self.event(t, i, EventKind::BarrierRelease { sync });
            let b = &mut self.boards[i];
            b.latched = None;
            if b.spec.counter_board {
                b.status = Status::Running;
                b.next_issue = t + self.tm.barrier_release;
            } else {
                b.status = Status::AwaitBcast;
            }
        }
        self.reads.push(ReadCycle {
            id: sync,
            count: 0,
            window_close_tick: close,
            release_tick: None,
            response_start_tick: None,
        });
        self.awaiting_response = Some(self.reads.len() - 1);
    }

    fn host_waits(&mut self, t: u64) {
        let live: Vec<usize> = (0..self.boards.len()).filter(|&i| self.boards[i].status != Status::Halted).collect();
        if live.is_empty() {
            return;
        }
        let all_arrived = live.iter().all(|&i| {
            let b = &self.boards[i];
            matches!(b.status, Status::WaitHost { ready, .. } if ready <= t) && b.drained(t)
        });
        if !all_arrived {
            return;
        }
        for &i in &live {
            let b = &mut self.boards[i];
            b.status = Status::Running;
            b.next_issue = t + self.tm.waithost_resume;
            self.events.push((t + self.tm.waithost_resume, i, EventKind::Resume));
        }
    }

    fn processor(&mut self, i: usize, t: u64) -> Result<(), SimError> {
        let tm = self.tm;
        let b = &self.boards[i];
        if b.status != Status::Running || b.next_issue > t {
            return Ok(());
        }
        let pc = b.pc;
        let word = *b.spec.words.get(pc).ok_or_else(|| SimError::BadInstruction {
            board: b.spec.board_id.clone(),
            pc,
        })?;
        let ins = Instr::decode(word).map_err(|_| SimError::BadInstruction {
            board: b.spec.board_id.clone(),
            pc,
        })?;
        if matches!(ins, Instr::Step { .. } | Instr::StepReg { .. }) && b.queue.len() >= tm.queue_depth {
            // queue full: a slot frees when the playing step ends
            let b = &mut self.boards[i];
            b.next_issue = b.hw_free.max(t + 1);
            return Ok(());
        }
        let cost = tm.instr_cost.of(ins.class());
        self.event(t, i, EventKind::Exec { pc, op: ins.to_string() });
        let sync = self.sync;
        let b = &mut self.boards[i];
        let mut next_pc = pc + 1;
        b.next_issue = t + cost;
        let branch = |taken: bool, off: i32| if taken { (pc as i64 + off as i64) as usize } else { pc + 1 };
        match ins {
            Instr::Add { rd, rs1, rs2 } => b.set(rd, b.reg(rs1).wrapping_add(b.reg(rs2))),
            Instr::Sub { rd, rs1, rs2 } => b.set(rd, b.reg(rs1).wrapping_sub(b.reg(rs2))),
            Instr::Slt { rd, rs1, rs2 } => b.set(rd, (b.reg(rs1) < b.reg(rs2)) as i32),
            Instr::Addi { rd, rs1, imm } => b.set(rd, b.reg(rs1).wrapping_add(imm)),
            Instr::Slti { rd, rs1, imm } => b.set(rd, (b.reg(rs1) < imm) as i32),
            Instr::Beq { rs1, rs2, off } => next_pc = branch(b.reg(rs1) == b.reg(rs2), off),
            Instr::Bne { rs1, rs2, off } => next_pc = branch(b.reg(rs1) != b.reg(rs2), off),
            Instr::Blt { rs1, rs2, off } => next_pc = branch(b.reg(rs1) < b.reg(rs2), off),
            Instr::Bge { rs1, rs2, off } => next_pc = branch(b.reg(rs1) >= b.reg(rs2), off),
            Instr::Jal { rd, off } => {
                b.set(rd, (pc + 1) as i32);
                next_pc = branch(true, off);
            }
            Instr::Lw { rd, rs1, imm } => {
                let idx = b.mem_index(rs1, imm)?;
                let v = b.mem[idx];
                b.set(rd, v);
            }
            Instr::Sw { rs2, rs1, imm } => {
                let idx = b.mem_index(rs1, imm)?;
                b.mem[idx] = b.reg(rs2);
            }
            Instr::Halt => {
                b.status = Status::Halted;
                self.event(t, i, EventKind::Halt);
                return Ok(());
            }
            Instr::Step { index } => {
                let feedback = b.spec.feedback.get(pc).copied().unwrap_or(false);
                b.queue.push_back(Queued {
                    entry: index,
                    avail: t + cost,
                    feedback,
                });
            }
            Instr::StepReg { rs1 } => {
                let feedback = b.spec.feedback.get(pc).copied().unwrap_or(false);
                let entry = b.reg(rs1) as u32;
                b.queue.push_back(Queued {
                    entry,
                    avail: t + cost,
                    feedback,
                });
            }
            Instr::Barrier => {
                b.status = Status::Barrier { ready: t + cost };
                self.event(t, i, EventKind::BarrierWait { sync: sync + 1 });
            }
            Instr::ReadCnt { rd, .. } => {
                let n = self.consumed;
                let v = self.detection.next(n).ok_or(SimError::DetectionScriptExhausted(n))?;
                self.consumed += 1;
                let b = &mut self.boards[i];
                b.set(rd, v);
                b.next_issue = t + cost + tm.readcnt_delay;
                if let Some(r) = self.reads.last_mut() {
                    r.count = v;
                }
            }
            Instr::Bcast { rs1 } => {
                let release = t + cost + tm.bcast_delay;
                self.release = Some((release, b.reg(rs1)));
                b.latched = Some(b.reg(rs1));
                // the broadcaster hears its own word back and stays aligned with receivers
                b.next_issue = release + tm.instr_cost.coord;
            }
            Instr::Recv { rd } => {
                let v = b.latched.ok_or_else(|| SimError::Protocol {
                    board: b.spec.board_id.clone(),
                })?;
                b.set(rd, v);
                self.event(t, i, EventKind::Recv { sync, value: v });
            }
            Instr::WaitHost { tag } => {
                b.status = Status::WaitHost { ready: t + cost, tag };
                self.event(t, i, EventKind::WaitHost { tag });
            }
        }
        self.boards[i].pc = next_pc;
        Ok(())
    }

    fn next_tick(&self, t: u64) -> Result<Option<u64>, SimError> {
        let mut next: Option<u64> = None;
        let mut consider = |x: u64| {
            let x = x.max(t + 1);
            next = Some(next.map_or(x, |n| n.min(x)));
        };
        if let Some((at, _)) = self.release {
            consider(at);
        }
        let mut all_idle = true;
        for b in &self.boards {
            if let Some(p) = &b.playing {
                consider(p.end);
            }
            if let Some(q) = b.queue.front() {
                consider(q.avail.max(b.hw_free));
            }
            match b.status {
                Status::Running => consider(b.next_issue),
                Status::Barrier { ready } | Status::WaitHost { ready, .. } if ready > t => consider(ready),
                _ => {}
            }
            if b.status != Status::Halted || !b.drained(t) {
                all_idle = false;
            }
        }
        if next.is_none() && !all_idle {
            let detail: Vec<String> = self
                .boards
                .iter()
                .map(|b| format!("{} {:?} at pc {}", b.spec.board_id, b.status, b.pc))
                .collect();
            return Err(SimError::Deadlock {
                tick: t,
                detail: detail.join(", "),
            });
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests;
