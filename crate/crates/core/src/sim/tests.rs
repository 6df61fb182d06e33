use super::*;
use crate::bench::{builtin_source, CALIBRATION};
use crate::pipeline::{compile, compile_json, CompileOptions};
use crate::program::build::*;
use crate::program::{CmpOp, SeqProgram};

const MAX: u64 = 1 << 40;

fn calibration() -> Compiled {
    compile_json(builtin_source(CALIBRATION).unwrap().as_bytes(), &CompileOptions::default()).unwrap()
}

fn sim(c: &Compiled, counts: Vec<i32>) -> SimTrace {
    run_compiled(c, &TimingModel::default(), &mut DetectionScript::scripted(counts), MAX).unwrap()
}

fn alternating(n: usize) -> Vec<i32> {
    (0..n).map(|i| if i % 2 == 0 { 3 } else { 7 }).collect()
}

#[test]
fn a_single_step_spans_its_duration() {
    let p = SeqProgram::new(two_board_config(), vec![state("A", 37)], vec![play("A")]);
    let c = compile(&p, &CompileOptions::default()).unwrap();
    let t = sim(&c, vec![]);
    let span = timeline_span(&t).unwrap();
    assert_eq!(span.1 - span.0, 37);
    assert!(t.events.iter().any(|e| e.kind == EventKind::Halt));
    assert_lockstep(&t).unwrap();
}

#[test]
fn feedback_free_timeline_is_the_sum_of_durations() {
    let p = SeqProgram::new(
        two_board_config(),
        vec![state("A", 10), state("B", 25), state("C", 3)],
        vec![play("A"), repeat(4, vec![play("B"), play("C")]), play("A")],
    );
    let c = compile(&p, &CompileOptions::default()).unwrap();
    let t = sim(&c, vec![]);
    let (start, end) = timeline_span(&t).unwrap();
    assert_eq!(end - start, 10 + 4 * (25 + 3) + 10);
    assert_lockstep(&t).unwrap();
    assert!(t.reads.is_empty());
}

#[test]
fn listing_latency_is_692_ns() {
    let c = calibration();
    let t = sim(&c, alternating(20));
    let recs = measure_feedback_latency(&t).unwrap();
    assert_eq!(recs.len(), 10);
    for r in &recs {
        assert_eq!(r.ns, 692, "{r:?}");
        assert!(r.count < 5);
    }
    assert_lockstep(&t).unwrap();
    check_protocol(&t).unwrap();
    assert!(t.boards_agree());
}

#[test]
fn no_taken_branch_reports_no_feedback_cycle() {
    let c = calibration();
    let t = sim(&c, vec![9; 20]);
    assert_eq!(measure_feedback_latency(&t), Err(NoFeedbackCycle { cycles: 20 }));
}

#[test]
fn doubling_costs_raises_latency() {
    let c = calibration();
    let slow = TimingModel::default().scale_instr_costs(2);
    let base = measure_feedback_latency(&sim(&c, alternating(20))).unwrap()[0].ns;
    let t = run_compiled(&c, &slow, &mut DetectionScript::scripted(alternating(20)), MAX).unwrap();
    let doubled = measure_feedback_latency(&t).unwrap()[0].ns;
    assert!(doubled > base, "{doubled} <= {base}");
}

#[test]
fn barrier_without_broadcast_deadlocks() {
    let c = calibration();
    let boards: Vec<SimBoard> = SimBoard::from_bundle(&c.boards, &c.tables.boards)
        .unwrap()
        .into_iter()
        .map(|mut b| {
            b.counter_board = false;
            b
        })
        .collect();
    let err = run(&boards, &TimingModel::default(), &mut DetectionScript::scripted(alternating(20)), MAX).unwrap_err();
    assert!(matches!(err, SimError::Deadlock { .. }), "{err}");
}

#[test]
fn running_out_of_counts_is_an_error() {
    let c = calibration();
    let err = run_compiled(&c, &TimingModel::default(), &mut DetectionScript::scripted(vec![1, 2]), MAX).unwrap_err();
    assert_eq!(err, SimError::DetectionScriptExhausted(2));
}

#[test]
fn max_ticks_is_enforced() {
    let c = calibration();
    let err = run_compiled(&c, &TimingModel::default(), &mut DetectionScript::cycled(vec![3]), 1000).unwrap_err();
    assert_eq!(err, SimError::MaxTicksExceeded(1000));
}

#[test]
fn out_of_range_step_is_reported() {
    let c = calibration();
    let mut boards = SimBoard::from_bundle(&c.boards, &c.tables.boards).unwrap();
    boards[0].durations.truncate(1);
    let err = run(&boards, &TimingModel::default(), &mut DetectionScript::cycled(vec![3]), MAX).unwrap_err();
    assert!(matches!(err, SimError::StepIndex { .. }), "{err}");
}

#[test]
fn injected_skew_breaks_lockstep() {
    let c = calibration();
    let mut t = sim(&c, alternating(20));
    let e = t
        .events
        .iter_mut()
        .find(|e| e.board == "ttl0" && matches!(e.kind, EventKind::StepStart { ordinal: 5, .. }))
        .unwrap();
    e.tick += 1;
    assert!(matches!(assert_lockstep(&t), Err(LockstepViolation::Skew { ordinal: 5, .. })));
}

#[test]
fn early_receive_breaks_protocol() {
    let c = calibration();
    let mut t = sim(&c, alternating(20));
    check_protocol(&t).unwrap();
    let e = t.events.iter_mut().find(|e| matches!(e.kind, EventKind::Recv { .. })).unwrap();
    e.tick = 0;
    assert!(check_protocol(&t).is_err());
}

#[test]
fn runs_are_deterministic() {
    let c = calibration();
    let a = run_compiled(&c, &TimingModel::default(), &mut DetectionScript::poisson(7, 4.0).unwrap(), MAX).unwrap();
    let b = run_compiled(&c, &TimingModel::default(), &mut DetectionScript::poisson(7, 4.0).unwrap(), MAX).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_jsonl(), b.to_jsonl());
}

#[test]
fn final_variables_agree_across_boards() {
    let p = SeqProgram::new(
        two_board_config(),
        vec![state("A", 10)],
        vec![
            assign("n", konst(0)),
            repeat(
                3,
                vec![
                    play("A"),
                    read_ttl("k", "ttl0", 0),
                    if_(cond(v("k"), CmpOp::GT, c(2)), vec![assign("n", add(var("n"), var("k")))], None),
                ],
            ),
        ],
    );
    let c = compile(&p, &CompileOptions::default()).unwrap();
    let t = sim(&c, vec![5, 1, 4]);
    assert!(t.boards_agree(), "{:?}", t.final_vars);
    assert_eq!(t.vars().get("n"), Some(&9));
}

#[test]
fn wait_host_resumes_all_boards_together() {
    let p = SeqProgram::new(
        two_board_config(),
        vec![state("A", 10)],
        vec![
            play("A"),
            crate::program::SeqNode::WaitResume {
                tag: "host".into(),
                loc: loc(2),
            },
            play("A"),
        ],
    );
    let c = compile(&p, &CompileOptions::default()).unwrap();
    let t = sim(&c, vec![]);
    let resumes: Vec<u64> = t.events.iter().filter(|e| e.kind == EventKind::Resume).map(|e| e.tick).collect();
    assert_eq!(resumes.len(), 2);
    assert_eq!(resumes[0], resumes[1]);
    let (start, end) = timeline_span(&t).unwrap();
    assert!(end - start >= 20 + TimingModel::default().waithost_resume);
    assert_lockstep(&t).unwrap();
}

#[test]
fn timing_model_rejects_slow_delays() {
    let tm = TimingModel {
        readcnt_delay: 25,
        ..TimingModel::default()
    };
    assert!(tm.validate().is_err());
    assert!(TimingModel::default().validate().is_ok());
}

#[test]
fn a_full_queue_stalls_the_processor() {
    let p = SeqProgram::new(two_board_config(), vec![state("A", 1000)], vec![repeat(50, vec![play("A")])]);
    let c = compile(&p, &CompileOptions::default()).unwrap();
    let tm = TimingModel {
        queue_depth: 4,
        ..TimingModel::default()
    };
    let t = run_compiled(&c, &tm, &mut DetectionScript::scripted(vec![]), MAX).unwrap();
    let (start, end) = timeline_span(&t).unwrap();
    assert_eq!(end - start, 50 * 1000);
    assert_lockstep(&t).unwrap();
}

#[test]
fn partial_timing_files_fill_in_defaults() {
    let tm: TimingModel = serde_json::from_str(r#"{"bcast_delay": 10, "instr_cost": {"coord": 30}}"#).unwrap();
    assert_eq!(tm.bcast_delay, 10);
    assert_eq!(tm.instr_cost.coord, 30);
    assert_eq!(tm.instr_cost.alu, 1);
    assert_eq!(tm.readcnt_delay, TimingModel::default().readcnt_delay);
    assert!(serde_json::from_str::<TimingModel>(r#"{"bogus": 1}"#).is_err());
}
