//! Step tables: the deduplicated hardware states each board can be told to
//! play, encoded as fixed-point words.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::Serialize;

use crate::decimal::Decimal;
use crate::program::{BoardKind, HardwareState, SeqNode, SeqProgram};

pub const MAGIC: &[u8; 4] = b"STBL";
pub const FORMAT_VERSION: u16 = 1;
pub const DEFAULT_SYSCLK_HZ: u64 = 1_000_000_000;
pub const AMP_BITS: u32 = 14;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StepTableError {
    #[error("state {state:?}: frequency {freq} Hz is not below half the {sysclk} Hz system clock")]
    Frequency { state: String, freq: Decimal, sysclk: u64 },
    #[error("step table needs {0} entries, more than the 4096 addressable")]
    TooManyEntries(usize),
    #[error("malformed step table image: {0}")]
    Format(String),
}

/// Frequency tuning word `round(freq * 2^32 / sysclk)`, exact.
pub fn freq_word(freq_hz: &Decimal, sysclk_hz: u64) -> Option<u32> {
    let (m, scale) = freq_hz.as_ratio();
    let den = 10i128.checked_pow(scale)?.checked_mul(sysclk_hz as i128)?;
    let num = m.checked_mul(1i128 << 32)?;
    let word = (2 * num + den) / (2 * den);
    u32::try_from(word).ok()
}

/// Amplitude scale `round(amp * (2^14 - 1))`, exact.
pub fn amp_word(amp: &Decimal) -> u16 {
    let (m, scale) = amp.as_ratio();
    let full = (1i128 << AMP_BITS) - 1;
    let den = 10i128.pow(scale);
    ((2 * m * full + den) / (2 * den)) as u16
}

/// Phase offset in units of 2π/2^16, wrapped into one turn.
pub fn phase_word(phase_rad: &Decimal) -> u16 {
    let turns = phase_rad.to_f64() / TAU;
    ((turns * 65536.0).round() as i64).rem_euclid(65536) as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
pub struct DdsWord {
    pub freq: u32,
    pub amp: u16,
    pub phase: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StepEntry {
    Dds { duration_ticks: u32, channels: Vec<DdsWord> },
    Ttl { duration_ticks: u32, out_mask: u32, in_mask: u32 },
}

impl StepEntry {
    pub fn duration_ticks(&self) -> u32 {
        match self {
            StepEntry::Dds { duration_ticks, .. } | StepEntry::Ttl { duration_ticks, .. } => *duration_ticks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BoardTable {
    pub board_id: String,
    pub kind: BoardKind,
    pub channel_count: u32,
    pub entries: Vec<StepEntry>,
    /// Source state names merged into each entry.
    pub names: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepTables {
    /// Entry index of each program state; `None` for states never played.
    pub state_entry: Vec<Option<u32>>,
    pub entry_count: usize,
    pub boards: Vec<BoardTable>,
}

/// States in the order they are first played, walking the tree in source
/// order.
fn play_order(p: &SeqProgram) -> Vec<usize> {
    let mut order = Vec::new();
    for node in &p.body {
        node.walk(&mut |n| {
            if let SeqNode::Play { state, .. } = n {
                if let Some(i) = p.state_index(state) {
                    if !order.contains(&i) {
                        order.push(i);
                    }
                }
            }
        });
    }
    order
}

/// Builds one table per board. States equal in every hardware field share
/// an entry; the scanned state, if any, always gets its own so that all
/// scan points produce identical control code.
pub fn build_step_tables(p: &SeqProgram, sysclk_hz: u64) -> Result<StepTables, StepTableError> {
    let scanned = p
        .scan
        .as_ref()
        .and_then(|s| crate::program::resolve_scan_target(p, s).ok());
    let mut state_entry = vec![None; p.states.len()];
    let mut keys: BTreeMap<(HardwareState, Option<usize>), u32> = BTreeMap::new();
    let mut reps: Vec<Vec<usize>> = Vec::new();
    for s in play_order(p) {
        let key = (p.states[s].hardware(), (scanned == Some(s)).then_some(s));
        let next = reps.len() as u32;
        let e = *keys.entry(key).or_insert_with(|| {
            reps.push(Vec::new());
            next
        });
        reps[e as usize].push(s);
        state_entry[s] = Some(e);
    }
    if reps.len() > 4096 {
        return Err(StepTableError::TooManyEntries(reps.len()));
    }
    let mut boards = Vec::new();
    for board in &p.config.boards {
        let mut entries = Vec::new();
        for members in &reps {
            let st = &p.states[members[0]];
            let entry = match board.kind {
                BoardKind::Dds => {
                    let mut channels = vec![DdsWord::default(); board.channel_count as usize];
                    for (i, ch) in channels.iter_mut().enumerate() {
                        if let Some(d) = st.dds_setting(&board.board_id, i as u32) {
                            let freq = freq_word(&d.freq_hz, sysclk_hz)
                                .filter(|w| *w < 1 << 31)
                                .ok_or_else(|| StepTableError::Frequency {
                                    state: st.name.clone(),
                                    freq: d.freq_hz.clone(),
                                    sysclk: sysclk_hz,
                                })?;
                            *ch = DdsWord {
                                freq,
                                amp: amp_word(&d.amp_frac),
                                phase: phase_word(&d.phase_rad),
                            };
                        }
                    }
                    StepEntry::Dds {
                        duration_ticks: st.duration_ticks,
                        channels,
                    }
                }
                BoardKind::Ttl => StepEntry::Ttl {
                    duration_ticks: st.duration_ticks,
                    out_mask: st.ttl_out.get(&board.board_id).copied().unwrap_or(0),
                    in_mask: st.ttl_in.get(&board.board_id).copied().unwrap_or(0),
                },
            };
            entries.push(entry);
        }
        boards.push(BoardTable {
            board_id: board.board_id.clone(),
            kind: board.kind,
            channel_count: board.channel_count,
            entries,
            names: reps
                .iter()
                .map(|m| m.iter().map(|&s| p.states[s].name.clone()).collect())
                .collect(),
        });
    }
    Ok(StepTables {
        state_entry,
        entry_count: reps.len(),
        boards,
    })
}

impl BoardTable {
    /// Little-endian image: magic, version, board kind, channel count,
    /// entry count, then the entries.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.kind {
            BoardKind::Dds => 0,
            BoardKind::Ttl => 1,
        });
        out.push(self.channel_count as u8);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.duration_ticks().to_le_bytes());
            match e {
                StepEntry::Dds { channels, .. } => {
                    for c in channels {
                        out.extend_from_slice(&c.freq.to_le_bytes());
                        out.extend_from_slice(&c.amp.to_le_bytes());
                        out.extend_from_slice(&c.phase.to_le_bytes());
                    }
                }
                StepEntry::Ttl { out_mask, in_mask, .. } => {
                    out.extend_from_slice(&out_mask.to_le_bytes());
                    out.extend_from_slice(&in_mask.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses an image produced by [`BoardTable::to_bytes`]. Board id and
    /// names are not part of the image.
    pub fn from_bytes(bytes: &[u8]) -> Result<(BoardKind, u32, Vec<StepEntry>), StepTableError> {
        let err = |m: &str| StepTableError::Format(m.to_string());
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| err("truncated header"))? != MAGIC {
            return Err(err("bad magic"));
        }
        if r.u16().ok_or_else(|| err("truncated header"))? != FORMAT_VERSION {
            return Err(err("unsupported version"));
        }
        let kind = match r.take(1).ok_or_else(|| err("truncated header"))?[0] {
            0 => BoardKind::Dds,
            1 => BoardKind::Ttl,
            _ => return Err(err("bad board kind")),
        };
        let channels = r.take(1).ok_or_else(|| err("truncated header"))?[0] as u32;
        let count = r.u32().ok_or_else(|| err("truncated header"))?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let trunc = || err("truncated entry");
            let duration_ticks = r.u32().ok_or_else(trunc)?;
            entries.push(match kind {
                BoardKind::Dds => {
                    let mut ch = Vec::new();
                    for _ in 0..channels {
                        ch.push(DdsWord {
                            freq: r.u32().ok_or_else(trunc)?,
                            amp: r.u16().ok_or_else(trunc)?,
                            phase: r.u16().ok_or_else(trunc)?,
                        });
                    }
                    StepEntry::Dds {
                        duration_ticks,
                        channels: ch,
                    }
                }
                BoardKind::Ttl => StepEntry::Ttl {
                    duration_ticks,
                    out_mask: r.u32().ok_or_else(trunc)?,
                    in_mask: r.u32().ok_or_else(trunc)?,
                },
            });
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok((kind, channels, entries))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Table-size accounting: how many entries a table would need if every
/// iteration of every bounded loop were unrolled into its own copy, against
/// the deduplicated table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Compactness {
    /// Total bounded-loop iterations; `None` when an unbounded loop occurs.
    pub iterations: Option<u64>,
    pub entries: usize,
    pub naive_entries: Option<u64>,
    pub reduction: Option<u64>,
}

fn iterations_of(nodes: &[SeqNode]) -> Option<u64> {
    let mut total = 0u64;
    for n in nodes {
        let k = match n {
            SeqNode::Loop { count, body, .. } => count.checked_mul(iterations_of(body)?.max(1))?,
            SeqNode::While { .. } => return None,
            SeqNode::If { then, else_, .. } => {
                let t = iterations_of(then)?;
                let e = match else_ {
                    Some(e) => iterations_of(e)?,
                    None => 0,
                };
                t.max(e)
            }
            _ => 0,
        };
        total = total.checked_add(k)?;
    }
    Some(total)
}

pub fn compactness(p: &SeqProgram, tables: &StepTables) -> Compactness {
    let iterations = iterations_of(&p.body).map(|n| n.max(1));
    let k = tables.entry_count;
    let naive = iterations.and_then(|n| n.checked_mul(k as u64));
    Compactness {
        iterations,
        entries: k,
        naive_entries: naive,
        reduction: naive.map(|nv| if k == 0 { 1 } else { nv / k as u64 }),
    }
}
