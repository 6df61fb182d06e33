//! Experiment programs: system configuration, hardware states and the
//! structured node tree, plus the JSON boundary format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::decimal::Decimal;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceLoc {
    pub file: String,
    pub line: u32,
}

impl fmt::Display for SourceLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BoardKind {
    Dds,
    Ttl,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardConfig {
    pub board_id: String,
    pub kind: BoardKind,
    pub channel_count: u32,
    /// Marks the TTL board that owns the photon counters.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub counters: bool,
}

fn default_tick_ns() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub boards: Vec<BoardConfig>,
    #[serde(default = "default_tick_ns")]
    pub clock_tick_ns: u32,
}

impl SystemConfig {
    pub fn board(&self, id: &str) -> Option<&BoardConfig> {
        self.boards.iter().find(|b| b.board_id == id)
    }

    pub fn counter_board(&self) -> Option<&BoardConfig> {
        self.boards.iter().find(|b| b.counters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChannelKind {
    DdsOut,
    TtlOut,
    TtlIn,
}

impl ChannelKind {
    pub fn board_kind(self) -> BoardKind {
        match self {
            ChannelKind::DdsOut => BoardKind::Dds,
            ChannelKind::TtlOut | ChannelKind::TtlIn => BoardKind::Ttl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelRef {
    pub board_id: String,
    pub channel_index: u32,
    pub kind: ChannelKind,
}

impl fmt::Display for ChannelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.board_id, self.channel_index)
    }
}

/// Output settings of one DDS channel within a state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdsSetting {
    pub board_id: String,
    pub channel_index: u32,
    pub freq_hz: Decimal,
    pub amp_frac: Decimal,
    pub phase_rad: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDecl {
    pub name: String,
    pub duration_ticks: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dds: Vec<DdsSetting>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ttl_out: BTreeMap<String, u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ttl_in: BTreeMap<String, u32>,
}

/// The value identity of a state: everything except its name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HardwareState {
    pub duration_ticks: u32,
    pub dds: Vec<DdsSetting>,
    pub ttl_out: BTreeMap<String, u32>,
    pub ttl_in: BTreeMap<String, u32>,
}

impl StateDecl {
    pub fn hardware(&self) -> HardwareState {
        HardwareState {
            duration_ticks: self.duration_ticks,
            dds: self.dds.clone(),
            ttl_out: self.ttl_out.clone(),
            ttl_in: self.ttl_in.clone(),
        }
    }

    /// Sorts DDS settings by channel and drops all-zero masks so that
    /// value-equal states compare equal regardless of how they were written.
    pub fn canonicalize(&mut self) {
        self.dds
            .sort_by(|a, b| (&a.board_id, a.channel_index).cmp(&(&b.board_id, b.channel_index)));
        self.ttl_out.retain(|_, m| *m != 0);
        self.ttl_in.retain(|_, m| *m != 0);
    }

    pub fn dds_setting(&self, board_id: &str, channel_index: u32) -> Option<&DdsSetting> {
        self.dds
            .iter()
            .find(|d| d.board_id == board_id && d.channel_index == channel_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CmpOp {
    LT,
    LE,
    EQ,
    NE,
    GE,
    GT,
}

impl CmpOp {
    pub fn eval(self, a: i32, b: i32) -> bool {
        match self {
            CmpOp::LT => a < b,
            CmpOp::LE => a <= b,
            CmpOp::EQ => a == b,
            CmpOp::NE => a != b,
            CmpOp::GE => a >= b,
            CmpOp::GT => a > b,
        }
    }

    /// The operator with operands swapped: `a op b == b op.mirror() a`.
    pub fn mirror(self) -> CmpOp {
        match self {
            CmpOp::LT => CmpOp::GT,
            CmpOp::LE => CmpOp::GE,
            CmpOp::GT => CmpOp::LT,
            CmpOp::GE => CmpOp::LE,
            op => op,
        }
    }

    pub fn negate(self) -> CmpOp {
        match self {
            CmpOp::LT => CmpOp::GE,
            CmpOp::LE => CmpOp::GT,
            CmpOp::EQ => CmpOp::NE,
            CmpOp::NE => CmpOp::EQ,
            CmpOp::GE => CmpOp::LT,
            CmpOp::GT => CmpOp::LE,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::LT => "<",
            CmpOp::LE => "<=",
            CmpOp::EQ => "==",
            CmpOp::NE => "!=",
            CmpOp::GE => ">=",
            CmpOp::GT => ">",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Value {
    Var(String),
    Const(i32),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondExpr {
    pub lhs: Value,
    pub op: CmpOp,
    pub rhs: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithExpr {
    Var(String),
    Const(i32),
    Add(Box<ArithExpr>, Box<ArithExpr>),
    Sub(Box<ArithExpr>, Box<ArithExpr>),
}

impl ArithExpr {
    pub fn vars(&self, out: &mut Vec<String>) {
        match self {
            ArithExpr::Var(v) => out.push(v.clone()),
            ArithExpr::Const(_) => {}
            ArithExpr::Add(a, b) | ArithExpr::Sub(a, b) => {
                a.vars(out);
                b.vars(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SeqNode {
    Play {
        state: String,
        loc: SourceLoc,
    },
    Loop {
        count: u64,
        body: Vec<SeqNode>,
        loc: SourceLoc,
    },
    While {
        cond: CondExpr,
        body: Vec<SeqNode>,
        loc: SourceLoc,
    },
    If {
        cond: CondExpr,
        then: Vec<SeqNode>,
        #[serde(rename = "else", default, skip_serializing_if = "Option::is_none")]
        else_: Option<Vec<SeqNode>>,
        loc: SourceLoc,
    },
    ReadTtl {
        target: String,
        counter: ChannelRef,
        loc: SourceLoc,
    },
    Assign {
        target: String,
        expr: ArithExpr,
        loc: SourceLoc,
    },
    WaitResume {
        tag: String,
        loc: SourceLoc,
    },
}

impl SeqNode {
    pub fn loc(&self) -> &SourceLoc {
        match self {
            SeqNode::Play { loc, .. }
            | SeqNode::Loop { loc, .. }
            | SeqNode::While { loc, .. }
            | SeqNode::If { loc, .. }
            | SeqNode::ReadTtl { loc, .. }
            | SeqNode::Assign { loc, .. }
            | SeqNode::WaitResume { loc, .. } => loc,
        }
    }

    /// Pre-order walk over this node and all nested nodes.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a SeqNode)) {
        f(self);
        match self {
            SeqNode::Loop { body, .. } | SeqNode::While { body, .. } => {
                body.iter().for_each(|n| n.walk(f))
            }
            SeqNode::If { then, else_, .. } => {
                then.iter().for_each(|n| n.walk(f));
                if let Some(e) = else_ {
                    e.iter().for_each(|n| n.walk(f));
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanField {
    DurationTicks,
    DdsFreq,
    DdsAmp,
    DdsPhase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub state: String,
    pub field: ScanField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<ChannelRef>,
    pub points: Vec<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqProgram {
    pub schema_version: u32,
    pub config: SystemConfig,
    pub states: Vec<StateDecl>,
    pub body: Vec<SeqNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error{}: {message}", loc.as_ref().map(|l| format!(" at {l}")).unwrap_or_default())]
    Validation {
        message: String,
        loc: Option<SourceLoc>,
    },
    #[error("scan target error: {0}")]
    ScanTarget(String),
}

fn invalid(message: impl Into<String>, loc: Option<&SourceLoc>) -> ProgramError {
    ProgramError::Validation {
        message: message.into(),
        loc: loc.cloned(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub message: String,
    pub loc: Option<SourceLoc>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.loc {
            Some(loc) => write!(f, "{loc}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Parses and validates a program document.
pub fn parse_program(bytes: &[u8]) -> Result<SeqProgram, ProgramError> {
    let mut program: SeqProgram =
        serde_json::from_slice(bytes).map_err(|e| ProgramError::Schema(e.to_string()))?;
    if program.schema_version != SCHEMA_VERSION {
        return Err(ProgramError::Schema(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            program.schema_version
        )));
    }
    for state in &mut program.states {
        state.canonicalize();
    }
    program.validate()?;
    Ok(program)
}

impl SeqProgram {
    pub fn new(config: SystemConfig, states: Vec<StateDecl>, body: Vec<SeqNode>) -> Self {
        let mut states = states;
        states.iter_mut().for_each(StateDecl::canonicalize);
        SeqProgram {
            schema_version: SCHEMA_VERSION,
            config,
            states,
            body,
            scan: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s.name == name)
    }

    /// Enforces the structural invariants of the configuration, the states
    /// and the node tree.
    pub fn validate(&self) -> Result<(), ProgramError> {
        validate_config(&self.config)?;
        let mut names = BTreeSet::new();
        for state in &self.states {
            if !names.insert(state.name.as_str()) {
                return Err(invalid(format!("duplicate state {:?}", state.name), None));
            }
            validate_state(&self.config, state)?;
        }
        let mut result = Ok(());
        for node in &self.body {
            node.walk(&mut |n| {
                if result.is_ok() {
                    result = self.validate_node(n);
                }
            });
        }
        result?;
        if let Some(scan) = &self.scan {
            self.validate_scan(scan)?;
        }
        Ok(())
    }

    fn validate_node(&self, node: &SeqNode) -> Result<(), ProgramError> {
        let loc = Some(node.loc());
        match node {
            SeqNode::Play { state, .. } => {
                if self.state_index(state).is_none() {
                    return Err(invalid(format!("unknown state {state:?}"), loc));
                }
            }
            SeqNode::Loop { count, .. } => {
                if *count == 0 {
                    return Err(invalid("loop count must be at least 1", loc));
                }
                if *count > i32::MAX as u64 {
                    return Err(invalid(format!("loop count {count} exceeds 32-bit range"), loc));
                }
            }
            SeqNode::ReadTtl { counter, .. } => {
                check_channel(&self.config, counter).map_err(|m| invalid(m, loc))?;
            }
            SeqNode::WaitResume { tag, .. } => {
                if tag.is_empty() {
                    return Err(invalid("wait_resume tag must be non-empty", loc));
                }
            }
            SeqNode::Assign { target, .. } if target.starts_with('%') => {
                return Err(invalid(format!("variable name {target:?} is reserved"), loc));
            }
            _ => {}
        }
        Ok(())
    }

    fn validate_scan(&self, scan: &ScanSpec) -> Result<(), ProgramError> {
        if scan.points.is_empty() {
            return Err(invalid("scan needs at least one point", None));
        }
        resolve_scan_target(self, scan).map_err(|m| invalid(m, None))?;
        if scan.field == ScanField::DurationTicks {
            for p in &scan.points {
                match p.to_i64() {
                    Some(v) if v >= 1 && v <= u32::MAX as i64 => {}
                    _ => return Err(invalid(format!("scan duration point {p} is not a positive integer"), None)),
                }
            }
        }
        if scan.field == ScanField::DdsAmp {
            for p in &scan.points {
                check_amp(p).map_err(|m| invalid(m, None))?;
            }
        }
        Ok(())
    }

    /// Returns a copy of the program with the scanned field replaced by
    /// `point`.
    pub fn with_scan_point(&self, point: &Decimal) -> Result<SeqProgram, ProgramError> {
        let scan = self
            .scan
            .as_ref()
            .ok_or_else(|| ProgramError::ScanTarget("program has no scan".into()))?;
        let state_idx = resolve_scan_target(self, scan).map_err(ProgramError::ScanTarget)?;
        let mut out = self.clone();
        let state = &mut out.states[state_idx];
        match scan.field {
            ScanField::DurationTicks => {
                state.duration_ticks = point
                    .to_i64()
                    .filter(|v| *v >= 1 && *v <= u32::MAX as i64)
                    .ok_or_else(|| ProgramError::ScanTarget(format!("bad duration {point}")))?
                    as u32;
            }
            field => {
                let ch = scan.channel.as_ref().expect("resolved");
                let setting = state
                    .dds
                    .iter_mut()
                    .find(|d| d.board_id == ch.board_id && d.channel_index == ch.channel_index)
                    .expect("resolved");
                match field {
                    ScanField::DdsFreq => setting.freq_hz = point.clone(),
                    ScanField::DdsAmp => setting.amp_frac = point.clone(),
                    ScanField::DdsPhase => setting.phase_rad = point.clone(),
                    ScanField::DurationTicks => unreachable!(),
                }
            }
        }
        Ok(out)
    }

    /// All user variables defined anywhere in the program, sorted.
    pub fn user_variables(&self) -> BTreeSet<String> {
        let mut vars = BTreeSet::new();
        for node in &self.body {
            node.walk(&mut |n| match n {
                SeqNode::ReadTtl { target, .. } | SeqNode::Assign { target, .. } => {
                    vars.insert(target.clone());
                }
                _ => {}
            });
        }
        vars
    }

    /// Front-end diagnostics: use before any definition, unknown states, and
    /// `read_ttl` on channels that are not photon-counter inputs.
    pub fn validate_variables(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let mut defined = BTreeSet::new();
        self.check_seq(&self.body, &mut defined, &mut diags);
        diags
    }

    fn check_seq(&self, nodes: &[SeqNode], defined: &mut BTreeSet<String>, diags: &mut Vec<Diagnostic>) {
        for node in nodes {
            let loc = Some(node.loc().clone());
            let use_var = |v: &str, defined: &BTreeSet<String>, diags: &mut Vec<Diagnostic>| {
                if !defined.contains(v) {
                    diags.push(Diagnostic {
                        message: format!("variable {v:?} may be used before it is defined"),
                        loc: loc.clone(),
                    });
                }
            };
            match node {
                SeqNode::Play { state, .. } => {
                    if self.state_index(state).is_none() {
                        diags.push(Diagnostic {
                            message: format!("unknown state {state:?}"),
                            loc: loc.clone(),
                        });
                    }
                }
                SeqNode::Assign { target, expr, .. } => {
                    let mut vars = Vec::new();
                    expr.vars(&mut vars);
                    for v in vars {
                        use_var(&v, defined, diags);
                    }
                    defined.insert(target.clone());
                }
                SeqNode::ReadTtl { target, counter, .. } => {
                    let is_counter = counter.kind == ChannelKind::TtlIn
                        && self
                            .config
                            .board(&counter.board_id)
                            .is_some_and(|b| b.kind == BoardKind::Ttl && b.counters);
                    if !is_counter {
                        diags.push(Diagnostic {
                            message: format!(
                                "read_ttl on {counter} which is not a photon-counter input of the counter board"
                            ),
                            loc: loc.clone(),
                        });
                    }
                    defined.insert(target.clone());
                }
                SeqNode::Loop { body, .. } => {
                    // matches the SSA view: the exit is reachable from the header
                    let mut inner = defined.clone();
                    self.check_seq(body, &mut inner, diags);
                }
                SeqNode::While { cond, body, .. } => {
                    for v in cond_vars(cond) {
                        use_var(&v, defined, diags);
                    }
                    let mut inner = defined.clone();
                    self.check_seq(body, &mut inner, diags);
                }
                SeqNode::If { cond, then, else_, .. } => {
                    for v in cond_vars(cond) {
                        use_var(&v, defined, diags);
                    }
                    let mut then_defs = defined.clone();
                    self.check_seq(then, &mut then_defs, diags);
                    let mut else_defs = defined.clone();
                    if let Some(e) = else_ {
                        self.check_seq(e, &mut else_defs, diags);
                    }
                    *defined = then_defs.intersection(&else_defs).cloned().collect();
                }
                SeqNode::WaitResume { .. } => {}
            }
        }
    }
}

pub fn cond_vars(cond: &CondExpr) -> Vec<String> {
    [&cond.lhs, &cond.rhs]
        .into_iter()
        .filter_map(|v| match v {
            Value::Var(name) => Some(name.clone()),
            Value::Const(_) => None,
        })
        .collect()
}

fn validate_config(config: &SystemConfig) -> Result<(), ProgramError> {
    if config.clock_tick_ns == 0 {
        return Err(invalid("clock_tick_ns must be positive", None));
    }
    let mut ids = BTreeSet::new();
    for b in &config.boards {
        if !ids.insert(b.board_id.as_str()) {
            return Err(invalid(format!("duplicate board id {:?}", b.board_id), None));
        }
        if b.channel_count == 0 {
            return Err(invalid(format!("board {:?} has no channels", b.board_id), None));
        }
        if b.kind == BoardKind::Ttl && b.channel_count > 32 {
            return Err(invalid(format!("TTL board {:?} exceeds 32 channels", b.board_id), None));
        }
        if b.counters && b.kind != BoardKind::Ttl {
            return Err(invalid(format!("counter board {:?} must be a TTL board", b.board_id), None));
        }
    }
    if config.boards.iter().filter(|b| b.counters).count() > 1 {
        return Err(invalid("at most one board may own the photon counters", None));
    }
    Ok(())
}

fn check_channel(config: &SystemConfig, ch: &ChannelRef) -> Result<(), String> {
    let board = config
        .board(&ch.board_id)
        .ok_or_else(|| format!("unknown board {:?}", ch.board_id))?;
    if board.kind != ch.kind.board_kind() {
        return Err(format!("channel kind {:?} does not fit board {:?}", ch.kind, ch.board_id));
    }
    if ch.channel_index >= board.channel_count {
        return Err(format!(
            "channel {} out of range for board {:?} ({} channels)",
            ch.channel_index, ch.board_id, board.channel_count
        ));
    }
    Ok(())
}

fn check_amp(amp: &Decimal) -> Result<(), String> {
    let (m, scale) = amp.as_ratio();
    if m < 0 || m > 10i128.pow(scale) {
        return Err(format!("amplitude {amp} outside [0, 1]"));
    }
    Ok(())
}

fn validate_state(config: &SystemConfig, state: &StateDecl) -> Result<(), ProgramError> {
    let ctx = |m: String| invalid(format!("state {:?}: {m}", state.name), None);
    if state.duration_ticks == 0 {
        return Err(ctx("duration_ticks must be at least 1".into()));
    }
    let mut seen = BTreeSet::new();
    for d in &state.dds {
        check_channel(
            config,
            &ChannelRef {
                board_id: d.board_id.clone(),
                channel_index: d.channel_index,
                kind: ChannelKind::DdsOut,
            },
        )
        .map_err(ctx)?;
        if !seen.insert((&d.board_id, d.channel_index)) {
            return Err(ctx(format!("channel {}[{}] set twice", d.board_id, d.channel_index)));
        }
        check_amp(&d.amp_frac).map_err(ctx)?;
        if d.freq_hz.is_negative() {
            return Err(ctx(format!("negative frequency {}", d.freq_hz)));
        }
    }
    for (board_id, mask) in state.ttl_out.iter().chain(&state.ttl_in) {
        let board = config
            .board(board_id)
            .ok_or_else(|| ctx(format!("unknown board {board_id:?}")))?;
        if board.kind != BoardKind::Ttl {
            return Err(ctx(format!("TTL mask on non-TTL board {board_id:?}")));
        }
        if board.channel_count < 32 && (*mask >> board.channel_count) != 0 {
            return Err(ctx(format!("mask {mask:#x} exceeds {} channels of {board_id:?}", board.channel_count)));
        }
    }
    Ok(())
}

/// Resolves a scan target to the index of the scanned state.
pub fn resolve_scan_target(p: &SeqProgram, scan: &ScanSpec) -> Result<usize, String> {
    let idx = p
        .state_index(&scan.state)
        .ok_or_else(|| format!("unknown scan state {:?}", scan.state))?;
    if scan.field != ScanField::DurationTicks {
        let ch = scan
            .channel
            .as_ref()
            .ok_or_else(|| "DDS scan needs a channel".to_string())?;
        if p.states[idx].dds_setting(&ch.board_id, ch.channel_index).is_none() {
            return Err(format!("state {:?} does not drive {ch}", scan.state));
        }
    }
    Ok(idx)
}

/// Small constructors for building programs in code.
pub mod build {
    use super::*;

    pub fn loc(line: u32) -> SourceLoc {
        SourceLoc {
            file: "<builder>".into(),
            line,
        }
    }

    pub fn play(state: &str) -> SeqNode {
        SeqNode::Play {
            state: state.into(),
            loc: loc(0),
        }
    }

    pub fn repeat(count: u64, body: Vec<SeqNode>) -> SeqNode {
        SeqNode::Loop {
            count,
            body,
            loc: loc(0),
        }
    }

    pub fn while_(cond: CondExpr, body: Vec<SeqNode>) -> SeqNode {
        SeqNode::While {
            cond,
            body,
            loc: loc(0),
        }
    }

    pub fn if_(cond: CondExpr, then: Vec<SeqNode>, else_: Option<Vec<SeqNode>>) -> SeqNode {
        SeqNode::If {
            cond,
            then,
            else_,
            loc: loc(0),
        }
    }

    pub fn read_ttl(target: &str, board_id: &str, channel_index: u32) -> SeqNode {
        SeqNode::ReadTtl {
            target: target.into(),
            counter: ChannelRef {
                board_id: board_id.into(),
                channel_index,
                kind: ChannelKind::TtlIn,
            },
            loc: loc(0),
        }
    }

    pub fn assign(target: &str, expr: ArithExpr) -> SeqNode {
        SeqNode::Assign {
            target: target.into(),
            expr,
            loc: loc(0),
        }
    }

    pub fn var(name: &str) -> ArithExpr {
        ArithExpr::Var(name.into())
    }

    pub fn konst(v: i32) -> ArithExpr {
        ArithExpr::Const(v)
    }

    pub fn add(a: ArithExpr, b: ArithExpr) -> ArithExpr {
        ArithExpr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: ArithExpr, b: ArithExpr) -> ArithExpr {
        ArithExpr::Sub(Box::new(a), Box::new(b))
    }

    pub fn cond(lhs: Value, op: CmpOp, rhs: Value) -> CondExpr {
        CondExpr { lhs, op, rhs }
    }

    pub fn v(name: &str) -> Value {
        Value::Var(name.into())
    }

    pub fn c(value: i32) -> Value {
        Value::Const(value)
    }

    /// A state with only a duration and optional TTL output mask on `ttl_board`.
    pub fn state(name: &str, duration_ticks: u32) -> StateDecl {
        StateDecl {
            name: name.into(),
            duration_ticks,
            dds: Vec::new(),
            ttl_out: BTreeMap::new(),
            ttl_in: BTreeMap::new(),
        }
    }

    pub fn two_board_config() -> SystemConfig {
        SystemConfig {
            boards: vec![
                BoardConfig {
                    board_id: "dds0".into(),
                    kind: BoardKind::Dds,
                    channel_count: 4,
                    counters: false,
                },
                BoardConfig {
                    board_id: "ttl0".into(),
                    kind: BoardKind::Ttl,
                    channel_count: 32,
                    counters: true,
                },
            ],
            clock_tick_ns: 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::build::*;
    use super::*;

    const LISTING: &str = r#"{
      "schema_version": 1,
      "config": {"boards": [
        {"board_id": "dds0", "kind": "DDS", "channel_count": 4},
        {"board_id": "ttl0", "kind": "TTL", "channel_count": 32, "counters": true}]},
      "states": [
        {"name": "Detect", "duration_ticks": 250, "ttl_in": {"ttl0": 1}},
        {"name": "Repump", "duration_ticks": 1250,
         "dds": [{"board_id": "dds0", "channel_index": 1, "freq_hz": "200000000", "amp_frac": "0.5", "phase_rad": "0"}]},
        {"name": "Cool", "duration_ticks": 250, "ttl_out": {"ttl0": 2}}
      ],
      "body": [{"kind": "loop", "count": 20, "loc": {"file": "l.py", "line": 1}, "body": [
        {"kind": "play", "state": "Detect", "loc": {"file": "l.py", "line": 2}},
        {"kind": "read_ttl", "target": "counts", "loc": {"file": "l.py", "line": 3},
         "counter": {"board_id": "ttl0", "channel_index": 0, "kind": "TTL_IN"}},
        {"kind": "if", "loc": {"file": "l.py", "line": 4},
         "cond": {"lhs": {"var": "counts"}, "op": "LT", "rhs": {"const": 5}},
         "then": [
           {"kind": "play", "state": "Repump", "loc": {"file": "l.py", "line": 5}},
           {"kind": "play", "state": "Cool", "loc": {"file": "l.py", "line": 5}}]}
      ]}]
    }"#;

    fn count_kinds(p: &SeqProgram) -> (usize, usize, usize) {
        let (mut loops, mut reads, mut ifs) = (0, 0, 0);
        for n in &p.body {
            n.walk(&mut |n| match n {
                SeqNode::Loop { .. } => loops += 1,
                SeqNode::ReadTtl { .. } => reads += 1,
                SeqNode::If { .. } => ifs += 1,
                _ => {}
            });
        }
        (loops, reads, ifs)
    }

    #[test]
    fn parses_feedback_listing() {
        let p = parse_program(LISTING.as_bytes()).unwrap();
        assert_eq!(count_kinds(&p), (1, 1, 1));
        assert!(p.validate_variables().is_empty());
    }

    #[test]
    fn empty_program_is_valid() {
        let doc = r#"{"schema_version":1,"config":{"boards":[{"board_id":"d","kind":"DDS","channel_count":1}]},"states":[],"body":[]}"#;
        let p = parse_program(doc.as_bytes()).unwrap();
        assert!(p.body.is_empty() && p.states.is_empty());
    }

    #[test]
    fn zero_loop_count_names_location() {
        let doc = LISTING.replace("\"count\": 20", "\"count\": 0");
        match parse_program(doc.as_bytes()) {
            Err(ProgramError::Validation { loc: Some(loc), .. }) => {
                assert_eq!(loc, SourceLoc { file: "l.py".into(), line: 1 })
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = parse_program(doc.as_bytes()).unwrap_err().to_string();
        assert!(msg.contains("l.py:1"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let doc = LISTING.replace("\"count\": 20", "\"count\": 20, \"unroll\": true");
        assert!(matches!(parse_program(doc.as_bytes()), Err(ProgramError::Schema(_))));
        let doc = LISTING.replace("\"schema_version\": 1", "\"schema_version\": 1, \"extra\": 0");
        assert!(matches!(parse_program(doc.as_bytes()), Err(ProgramError::Schema(_))));
    }

    #[test]
    fn missing_loc_is_schema_error() {
        let doc = LISTING.replace(r#""state": "Detect", "loc": {"file": "l.py", "line": 2}"#, r#""state": "Detect""#);
        assert!(matches!(parse_program(doc.as_bytes()), Err(ProgramError::Schema(_))));
    }

    #[test]
    fn dangling_state_is_validation_error() {
        let doc = LISTING.replace("\"state\": \"Cool\"", "\"state\": \"Nope\"");
        assert!(matches!(parse_program(doc.as_bytes()), Err(ProgramError::Validation { .. })));
    }

    #[test]
    fn wrong_schema_version() {
        let doc = LISTING.replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(parse_program(doc.as_bytes()), Err(ProgramError::Schema(_))));
    }

    #[test]
    fn read_on_dds_channel_is_diagnosed() {
        let doc = LISTING.replace(
            r#"{"board_id": "ttl0", "channel_index": 0, "kind": "TTL_IN"}"#,
            r#"{"board_id": "dds0", "channel_index": 0, "kind": "DDS_OUT"}"#,
        );
        let p = parse_program(doc.as_bytes()).unwrap();
        let diags = p.validate_variables();
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert!(diags[0].message.contains("photon-counter"));
    }

    #[test]
    fn use_of_never_assigned_variable() {
        let mut p = SeqProgram::new(two_board_config(), vec![state("A", 1)], vec![]);
        p.body = vec![if_(cond(v("x"), CmpOp::LT, c(3)), vec![play("A")], None)];
        assert_eq!(p.validate_variables().len(), 1);
    }

    #[test]
    fn definitions_in_one_arm_do_not_escape() {
        let mut p = SeqProgram::new(two_board_config(), vec![state("A", 1)], vec![]);
        p.body = vec![
            assign("y", konst(0)),
            if_(cond(v("y"), CmpOp::EQ, c(0)), vec![assign("x", konst(1))], None),
            assign("z", var("x")),
        ];
        assert_eq!(p.validate_variables().len(), 1);
        // both arms define it
        p.body[1] = if_(
            cond(v("y"), CmpOp::EQ, c(0)),
            vec![assign("x", konst(1))],
            Some(vec![assign("x", konst(2))]),
        );
        assert!(p.validate_variables().is_empty());
    }

    #[test]
    fn dds_order_and_zero_masks_do_not_affect_identity() {
        let doc_a = r#"{"name":"S","duration_ticks":5,"ttl_out":{"ttl0":0},
            "dds":[{"board_id":"dds0","channel_index":1,"freq_hz":"1.50","amp_frac":"1","phase_rad":"0"},
                   {"phase_rad":"0","amp_frac":"0.5","freq_hz":"2","channel_index":0,"board_id":"dds0"}]}"#;
        let doc_b = r#"{"duration_ticks":5,"name":"T",
            "dds":[{"board_id":"dds0","channel_index":0,"freq_hz":"2.0","amp_frac":"0.50","phase_rad":"0"},
                   {"board_id":"dds0","channel_index":1,"freq_hz":"1.5","amp_frac":"1.0","phase_rad":"0.0"}]}"#;
        let mut a: StateDecl = serde_json::from_str(doc_a).unwrap();
        let mut b: StateDecl = serde_json::from_str(doc_b).unwrap();
        a.canonicalize();
        b.canonicalize();
        assert_eq!(a.hardware(), b.hardware());
        use std::hash::{DefaultHasher, Hash, Hasher};
        let h = |s: &HardwareState| {
            let mut hasher = DefaultHasher::new();
            s.hash(&mut hasher);
            hasher.finish()
        };
        assert_eq!(h(&a.hardware()), h(&b.hardware()));
    }

    #[test]
    fn amplitude_out_of_range() {
        let doc = LISTING.replace("\"amp_frac\": \"0.5\"", "\"amp_frac\": \"1.01\"");
        assert!(matches!(parse_program(doc.as_bytes()), Err(ProgramError::Validation { .. })));
    }

    #[test]
    fn numbers_must_be_strings() {
        let doc = LISTING.replace("\"amp_frac\": \"0.5\"", "\"amp_frac\": 0.5");
        assert!(matches!(parse_program(doc.as_bytes()), Err(ProgramError::Schema(_))));
    }

    #[test]
    fn round_trip() {
        let p = parse_program(LISTING.as_bytes()).unwrap();
        let again = parse_program(p.to_json().as_bytes()).unwrap();
        assert_eq!(p, again);
    }
}
