use std::collections::BTreeMap;

use serde::Serialize;

use super::{EventKind, SimTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LatencyRecord {
    pub cycle: u64,
    pub count: i32,
    pub window_close_tick: u64,
    pub response_start_tick: u64,
    pub ticks: u64,
    pub ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no feedback branch was taken in {cycles} read cycles")]
pub struct NoFeedbackCycle {
    pub cycles: usize,
}

/// Latency from the end of each detection window to the first step of the
/// branch it selected, for every cycle whose feedback branch was taken.
pub fn measure_feedback_latency(trace: &SimTrace) -> Result<Vec<LatencyRecord>, NoFeedbackCycle> {
    let records: Vec<LatencyRecord> = trace
        .reads
        .iter()
        .filter_map(|r| {
            let start = r.response_start_tick?;
            let ticks = start.saturating_sub(r.window_close_tick);
            Some(LatencyRecord {
                cycle: r.id,
                count: r.count,
                window_close_tick: r.window_close_tick,
                response_start_tick: start,
                ticks,
                ns: ticks * trace.tick_ns,
            })
        })
        .collect();
    if records.is_empty() {
        return Err(NoFeedbackCycle { cycles: trace.reads.len() });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LockstepViolation {
    #[error("board {board} played {got} steps, {reference} played {want}")]
    StepCount { board: String, reference: String, got: usize, want: usize },
    #[error("step {ordinal} on {board} spans {got:?}, on {reference} {want:?}")]
    Skew {
        ordinal: u64,
        board: String,
        reference: String,
        got: (u64, u64),
        want: (u64, u64),
    },
}

fn step_spans(trace: &SimTrace) -> BTreeMap<&str, BTreeMap<u64, (u64, u64)>> {
    let mut spans: BTreeMap<&str, BTreeMap<u64, (u64, u64)>> = BTreeMap::new();
    for b in &trace.boards {
        spans.insert(b.as_str(), BTreeMap::new());
    }
    for e in &trace.events {
        let m = spans.entry(e.board.as_str()).or_default();
        match e.kind {
            EventKind::StepStart { ordinal, .. } => {
                m.entry(ordinal).or_insert((e.tick, e.tick)).0 = e.tick;
            }
            EventKind::StepEnd { ordinal, .. } => {
                m.entry(ordinal).or_insert((e.tick, e.tick)).1 = e.tick;
            }
            _ => {}
        }
    }
    spans
}

/// Every board must start and end each step on the same tick.
pub fn assert_lockstep(trace: &SimTrace) -> Result<(), LockstepViolation> {
    let spans = step_spans(trace);
    let mut it = spans.iter();
    let Some((ref_board, reference)) = it.next() else { return Ok(()) };
    for (board, steps) in it {
        if steps.len() != reference.len() {
            return Err(LockstepViolation::StepCount {
                board: board.to_string(),
                reference: ref_board.to_string(),
                got: steps.len(),
                want: reference.len(),
            });
        }
        for ((ordinal, got), want) in steps.iter().zip(reference.values()) {
            if got != want {
                return Err(LockstepViolation::Skew {
                    ordinal: *ordinal,
                    board: board.to_string(),
                    reference: ref_board.to_string(),
                    got: *got,
                    want: *want,
                });
            }
        }
    }
    Ok(())
}

/// No board may consume a broadcast before it has been delivered.
pub fn check_protocol(trace: &SimTrace) -> Result<(), String> {
    let mut delivered: BTreeMap<u64, (u64, i32)> = BTreeMap::new();
    for e in &trace.events {
        if let EventKind::Bcast { sync, value } = e.kind {
            delivered.insert(sync, (e.tick, value));
        }
    }
    for e in &trace.events {
        if let EventKind::Recv { sync, value } = e.kind {
            match delivered.get(&sync) {
                None => return Err(format!("{} received cycle {sync} which was never broadcast", e.board)),
                Some((t, _)) if e.tick < *t => {
                    return Err(format!("{} received cycle {sync} at tick {} before delivery at {t}", e.board, e.tick))
                }
                Some((_, v)) if *v != value => {
                    return Err(format!("{} received {value} in cycle {sync}, broadcast was {v}", e.board))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// First step start and last step end over all boards.
pub fn timeline_span(trace: &SimTrace) -> Option<(u64, u64)> {
    let starts = trace.events.iter().filter_map(|e| matches!(e.kind, EventKind::StepStart { .. }).then_some(e.tick));
    let ends = trace.events.iter().filter_map(|e| matches!(e.kind, EventKind::StepEnd { .. }).then_some(e.tick));
    Some((starts.min()?, ends.max()?))
}
